//! Variational qTCA: the Hermitian extension `G̃ = [[0, −ρ_G], [−ρ_G†, 0]]`,
//! a layered hardware-style ansatz over the full extended register, and
//! variational quantum deflation driven by Nelder–Mead with random restarts.
//!
//! The minimizers of `G̃` sit at `−σ_k` with eigenvectors `(u_k, v_k)/√2`,
//! so the `d` largest singular values of `ρ_G` come out in descending order
//! and the lower blocks `v_k` are its right singular vectors.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{c64, canonical_phase, eig_hermitian, trace, ComplexMatrix, C64};
use crate::qsim::{swap_test, DensityState, OneStepEstimator};
use crate::random::seeded;
use crate::tca::{map_to_g_eigenvectors, TcaMatrices, TcaModel};

#[derive(Debug, Clone)]
pub struct ExtendedOperator {
    pub g_tilde: ComplexMatrix,
    /// Side of the `ρ_G` blocks.
    pub block: usize,
    estimator: OneStepEstimator,
}

impl ExtendedOperator {
    pub fn qubits(&self) -> usize {
        (2 * self.block).trailing_zeros() as usize
    }
}

pub fn build_g_tilde(rho_g: &DensityState) -> Result<ExtendedOperator> {
    build_g_tilde_from(rho_g.matrix())
}

/// `G̃` for any square block; the block need not be a density matrix.
pub fn build_g_tilde_from(rho: &ComplexMatrix) -> Result<ExtendedOperator> {
    let n = rho.nrows();
    if n != rho.ncols() || !n.is_power_of_two() {
        return Err(Error::Dimension(format!(
            "extension needs a square power-of-two block, got {}x{}",
            n,
            rho.ncols()
        )));
    }
    let mut g = ComplexMatrix::zeros(2 * n, 2 * n);
    g.view_mut((0, n), (n, n)).copy_from(&(-rho));
    g.view_mut((n, 0), (n, n)).copy_from(&(-rho.adjoint()));
    let estimator = OneStepEstimator::new(&g)?;
    Ok(ExtendedOperator {
        g_tilde: g,
        block: n,
        estimator,
    })
}

/// Layered circuit: a rotation block, then `layers` rounds of CZ ladder and
/// rotation block. Each block applies `R_y(θ)` then `R_z(φ)` to every qubit.
#[derive(Debug, Clone, PartialEq)]
pub struct AnsatzParams {
    pub layers: usize,
    /// `[block][qubit][θ, φ]`, flattened.
    pub thetas: Vec<f64>,
}

impl AnsatzParams {
    pub fn count(layers: usize, qubits: usize) -> usize {
        (layers + 1) * qubits * 2
    }

    pub fn zeros(layers: usize, qubits: usize) -> Self {
        Self {
            layers,
            thetas: vec![0.0; Self::count(layers, qubits)],
        }
    }

    pub fn random(layers: usize, qubits: usize, rng: &mut impl Rng) -> Self {
        let thetas = (0..Self::count(layers, qubits))
            .map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
            .collect();
        Self { layers, thetas }
    }
}

fn apply_single(state: &mut [C64], qubits: usize, target: usize, gate: [[C64; 2]; 2]) {
    let stride = 1 << (qubits - 1 - target);
    for base in (0..state.len()).filter(|i| i & stride == 0) {
        let (a, b) = (state[base], state[base | stride]);
        state[base] = gate[0][0] * a + gate[0][1] * b;
        state[base | stride] = gate[1][0] * a + gate[1][1] * b;
    }
}

fn ry(theta: f64) -> [[C64; 2]; 2] {
    let (s, c) = (0.5 * theta).sin_cos();
    [[c64(c, 0.0), c64(-s, 0.0)], [c64(s, 0.0), c64(c, 0.0)]]
}

fn rz(phi: f64) -> [[C64; 2]; 2] {
    let zero = c64(0.0, 0.0);
    [
        [C64::from_polar(1.0, -0.5 * phi), zero],
        [zero, C64::from_polar(1.0, 0.5 * phi)],
    ]
}

fn cz_ladder(state: &mut [C64], qubits: usize) {
    for k in 0..qubits.saturating_sub(1) {
        let mask = (1 << (qubits - 1 - k)) | (1 << (qubits - 2 - k));
        for (i, amp) in state.iter_mut().enumerate() {
            if i & mask == mask {
                *amp = -*amp;
            }
        }
    }
}

pub fn ansatz_prepare(params: &AnsatzParams, qubits: usize) -> Result<DVector<C64>> {
    if qubits == 0 || params.thetas.len() != AnsatzParams::count(params.layers, qubits) {
        return Err(Error::Parameter(format!(
            "{} angles for {} layers on {qubits} qubits",
            params.thetas.len(),
            params.layers
        )));
    }
    if params.thetas.iter().any(|t| !t.is_finite()) {
        return Err(Error::Parameter("non-finite ansatz angle".into()));
    }
    let mut state = vec![c64(0.0, 0.0); 1 << qubits];
    state[0] = c64(1.0, 0.0);
    for (block, angles) in params.thetas.chunks(2 * qubits).enumerate() {
        if block > 0 {
            cz_ladder(&mut state, qubits);
        }
        for (q, pair) in angles.chunks(2).enumerate() {
            apply_single(&mut state, qubits, q, ry(pair[0]));
            apply_single(&mut state, qubits, q, rz(pair[1]));
        }
    }
    Ok(DVector::from_vec(state))
}

/// `⟨ψ|G̃|ψ⟩` from the one-step phase-estimation circuit.
pub fn expectation(psi: &DVector<C64>, g: &ExtendedOperator) -> Result<f64> {
    g.estimator.estimate(psi)
}

/// `|⟨a|b⟩|²` from the swap test.
pub fn overlap(a: &DVector<C64>, b: &DVector<C64>) -> Result<f64> {
    Ok((2.0 * swap_test(a, b)? - 1.0).clamp(0.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct FoundState {
    /// Converged expectation value, approximately `−σ_k`.
    pub value: f64,
    pub psi: DVector<C64>,
    pub params: AnsatzParams,
}

#[derive(Debug, Clone, Default)]
pub struct DeflationState {
    pub found: Vec<FoundState>,
    pub alphas: Vec<f64>,
    /// Lowest cost seen in any evaluation, across all stages.
    pub lowest_cost: f64,
    pub evaluations: u64,
    pub warnings: Vec<String>,
}

/// Deflated cost: expectation plus `Σ αᵢ |⟨ψ|ψᵢ⟩|²` over the states found so far.
pub fn cost(params: &AnsatzParams, g: &ExtendedOperator, defl: &DeflationState) -> Result<f64> {
    let psi = ansatz_prepare(params, g.qubits())?;
    let mut value = expectation(&psi, g)?;
    for (found, alpha) in defl.found.iter().zip(&defl.alphas) {
        value += alpha * overlap(&psi, &found.psi)?;
    }
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqdConfig {
    pub layers: usize,
    pub restarts: usize,
    /// Stop a simplex run once the best value improves by less than
    /// `stall_tol` over `stall_window` iterations.
    pub stall_window: usize,
    pub stall_tol: f64,
    pub max_iterations: usize,
    /// Relative tolerance for the ordering check between stages.
    pub tolerance: f64,
}

impl Default for VqdConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            restarts: 8,
            stall_window: 50,
            stall_tol: 1e-8,
            max_iterations: 20_000,
            tolerance: 5e-2,
        }
    }
}

/// Adaptive Nelder–Mead (dimension-dependent coefficients). Returns the best
/// point and value.
fn nelder_mead<F>(f: &F, start: &[f64], step: f64, cfg: &VqdConfig) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let n = start.len();
    let nf = n as f64;
    let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += step;
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    let mut history = Vec::with_capacity(cfg.max_iterations);
    for _ in 0..cfg.max_iterations {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        history.push(values[0]);
        if history.len() > cfg.stall_window
            && history[history.len() - 1 - cfg.stall_window] - values[0] < cfg.stall_tol
        {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|p| p[k]).sum::<f64>() / nf)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let reflected = along(alpha);
        let fr = f(&reflected);
        if fr < values[0] {
            let expanded = along(alpha * beta);
            let fe = f(&expanded);
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
        } else {
            let (contracted, fc) = if fr < values[n] {
                let c = along(alpha * gamma);
                let fc = f(&c);
                (c, fc)
            } else {
                let c = along(-gamma);
                let fc = f(&c);
                (c, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = contracted;
                values[n] = fc;
            } else {
                let best = simplex[0].clone();
                for i in 1..=n {
                    for (x, b) in simplex[i].iter_mut().zip(&best) {
                        *x = b + delta * (*x - b);
                    }
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    (simplex[best].clone(), values[best])
}

/// Repeats simplex runs from the best point with a fresh, shrinking simplex
/// until a round no longer improves.
fn minimize<F>(f: &F, start: Vec<f64>, cfg: &VqdConfig) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let mut step = 0.5;
    let (mut x, mut fx) = nelder_mead(f, &start, step, cfg);
    for _ in 0..12 {
        step *= 0.5;
        let (y, fy) = nelder_mead(f, &x, step, cfg);
        let gain = fx - fy;
        if fy < fx {
            x = y;
            fx = fy;
        }
        if gain < cfg.stall_tol {
            break;
        }
    }
    (x, fx)
}

struct MinTracker(AtomicU64);

impl MinTracker {
    fn new() -> Self {
        Self(AtomicU64::new(f64::INFINITY.to_bits()))
    }

    fn record(&self, v: f64) {
        let mut cur = self.0.load(Ordering::Relaxed);
        while v < f64::from_bits(cur) {
            match self.0.compare_exchange_weak(cur, v.to_bits(), Ordering::Relaxed, Ordering::Relaxed) {
                Ok(_) => break,
                Err(seen) => cur = seen,
            }
        }
    }

    fn get(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::Relaxed))
    }
}

/// Finds the `d` lowest eigenvalues of `G̃` stage by stage.
pub fn vqd_solve(g: &ExtendedOperator, d: usize, cfg: &VqdConfig, seed: u64) -> Result<DeflationState> {
    let qubits = g.qubits();
    if d == 0 || d > g.block {
        return Err(Error::Parameter(format!("d = {d} outside 1..={}", g.block)));
    }
    if cfg.restarts == 0 {
        return Err(Error::Parameter("at least one restart is required".into()));
    }
    // tr(ρ_G) for the upper-right block, which bounds σ_max from above.
    let block_trace = trace(&g.g_tilde.view((0, g.block), (g.block, g.block)).into_owned()).re.abs();
    let alpha = 2.0 * block_trace.max(1e-12);
    let mut rng = seeded(seed);
    let mut defl = DeflationState {
        lowest_cost: f64::INFINITY,
        ..Default::default()
    };
    for stage in 0..d {
        let starts: Vec<AnsatzParams> = (0..cfg.restarts)
            .map(|_| AnsatzParams::random(cfg.layers, qubits, &mut rng))
            .collect();
        let tracker = MinTracker::new();
        let evaluations = AtomicU64::new(0);
        let snapshot = defl.clone();
        let objective = |x: &[f64]| -> f64 {
            let p = AnsatzParams {
                layers: cfg.layers,
                thetas: x.to_vec(),
            };
            let v = cost(&p, g, &snapshot).unwrap_or(f64::INFINITY);
            evaluations.fetch_add(1, Ordering::Relaxed);
            tracker.record(v);
            v
        };
        let runs: Vec<(Vec<f64>, f64)> = starts
            .into_par_iter()
            .map(|p| minimize(&objective, p.thetas, cfg))
            .collect();
        let (best, _) = runs
            .into_iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one restart");
        let params = AnsatzParams {
            layers: cfg.layers,
            thetas: best,
        };
        let psi = ansatz_prepare(&params, qubits)?;
        let value = expectation(&psi, g)?;
        defl.lowest_cost = defl.lowest_cost.min(tracker.get());
        defl.evaluations += evaluations.into_inner();
        if let Some(prev) = defl.found.last() {
            if value < prev.value - cfg.tolerance * prev.value.abs() {
                let msg = format!(
                    "stage {}: value {value:.6} below previous stage {:.6}; deflation ordering violated",
                    stage + 1,
                    prev.value
                );
                log::warn!("{msg}");
                defl.warnings.push(msg);
            }
        }
        defl.found.push(FoundState { value, psi, params });
        defl.alphas.push(alpha);
    }
    Ok(defl)
}

const SPLIT_MIN_NORM: f64 = 1e-6;

/// Builds a TCA model from the lower blocks of the found states. Eigenvalues
/// of the normalized `ρ_G` are rescaled by `trace_scale = tr(G)`.
pub fn extract_singular_pairs(defl: &DeflationState, m: &TcaMatrices, trace_scale: f64) -> Result<TcaModel> {
    let n = m.n();
    let mut vectors = Vec::with_capacity(defl.found.len());
    for (index, found) in defl.found.iter().enumerate() {
        let block = found.psi.len() / 2;
        if block < n {
            return Err(Error::Dimension(format!("extended state block {block} smaller than n = {n}")));
        }
        let mut lower = found.psi.rows(block, n).into_owned();
        let norm = lower.norm();
        if norm < SPLIT_MIN_NORM {
            return Err(Error::DegenerateSplit { index, norm });
        }
        lower.unscale_mut(norm);
        canonical_phase(&mut lower);
        vectors.push(lower.map(|z| z.re));
    }
    Ok(TcaModel {
        w: map_to_g_eigenvectors(&m.a_inv_sqrt()?, vectors),
        eigenvalues: defl.found.iter().map(|f| -f.value * trace_scale).collect(),
        degenerate_cut: false,
    })
}

/// Dense singular values of the `ρ_G` block, descending.
pub fn block_singular_values(g: &ExtendedOperator) -> Result<Vec<f64>> {
    let eig = eig_hermitian(&g.g_tilde)?;
    Ok(eig.eigenvalues.iter().take(g.block).map(|l| -l).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RealMatrix;
    use crate::random::{random_density, random_unit_vector};
    use proptest::prelude::*;

    fn diag_state(values: &[f64]) -> DensityState {
        let m = ComplexMatrix::from_diagonal(&DVector::from_iterator(
            values.len(),
            values.iter().map(|&x| c64(x, 0.0)),
        ));
        DensityState::from_index_operator(&m).unwrap()
    }

    #[test]
    fn extension_spectrum_examples() {
        let g = build_g_tilde(&diag_state(&[0.7, 0.3])).unwrap();
        let eig = eig_hermitian(&g.g_tilde).unwrap();
        let expected = [-0.7, -0.3, 0.3, 0.7];
        for (a, b) in eig.eigenvalues.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = build_g_tilde_from(&ComplexMatrix::zeros(2, 2)).unwrap();
        assert_eq!(zero.g_tilde, ComplexMatrix::zeros(4, 4));
        let psi = random_unit_vector(4, &mut seeded(1));
        assert!(expectation(&psi, &zero).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ground_state_has_block_form() {
        let rho = random_density(4, &mut seeded(2));
        let g = build_g_tilde_from(&rho).unwrap();
        let eig = eig_hermitian(&g.g_tilde).unwrap();
        let w = eig.eigenvectors.column(0);
        let (u, v) = (w.rows(0, 4).into_owned(), w.rows(4, 4).into_owned());
        let sigma = -eig.eigenvalues[0];
        assert!((&rho * &v - u.scale(sigma)).norm() < 1e-10);
        assert!((u.norm() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10);
    }

    #[test]
    fn extension_spectrum_is_symmetric() {
        for seed in 0..10 {
            let rho = random_density(4, &mut seeded(seed));
            let g = build_g_tilde_from(&rho).unwrap();
            assert!(crate::numerics::hermitian_defect(&g.g_tilde) < 1e-12);
            let l = eig_hermitian(&g.g_tilde).unwrap().eigenvalues;
            for k in 0..4 {
                assert!((l[k] + l[7 - k]).abs() < 1e-10);
            }
            let sv = rho.clone().singular_values();
            let mut sv: Vec<f64> = sv.iter().copied().collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            for (a, b) in block_singular_values(&g).unwrap().iter().zip(&sv) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ansatz_examples() {
        let psi = ansatz_prepare(&AnsatzParams::zeros(3, 3), 3).unwrap();
        assert!((psi[0] - c64(1.0, 0.0)).norm() < 1e-15);
        let flip = AnsatzParams {
            layers: 0,
            thetas: vec![std::f64::consts::PI, 0.0],
        };
        let psi = ansatz_prepare(&flip, 1).unwrap();
        assert!((psi[1].norm() - 1.0).abs() < 1e-15);
        let bad = AnsatzParams {
            layers: 1,
            thetas: vec![0.0; 3],
        };
        assert!(matches!(ansatz_prepare(&bad, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn ansatz_is_unitary() {
        let mut rng = seeded(3);
        for _ in 0..1000 {
            let p = AnsatzParams::random(3, 3, &mut rng);
            let psi = ansatz_prepare(&p, 3).unwrap();
            assert!((psi.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn upper_block_states_see_nothing() {
        let g = build_g_tilde(&diag_state(&[0.6, 0.3, 0.1, 0.0])).unwrap();
        let mut psi = DVector::zeros(8);
        let upper = random_unit_vector(4, &mut seeded(4));
        psi.rows_mut(0, 4).copy_from(&upper);
        assert!(expectation(&psi, &g).unwrap().abs() < 1e-12);
    }

    #[test]
    fn expectation_and_cost_at_the_ground_state() {
        let g = build_g_tilde(&diag_state(&[0.7, 0.3])).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let ground = DVector::from_vec(vec![c64(s, 0.), c64(0., 0.), c64(s, 0.), c64(0., 0.)]);
        assert!((expectation(&ground, &g).unwrap() + 0.7).abs() < 1e-10);
        let anti = DVector::from_vec(vec![c64(s, 0.), c64(0., 0.), c64(-s, 0.), c64(0., 0.)]);
        assert!((expectation(&anti, &g).unwrap() - 0.7).abs() < 1e-10);

        // The ansatz reaches it with R_y(π/2) on the block qubit.
        let params = AnsatzParams {
            layers: 0,
            thetas: vec![std::f64::consts::FRAC_PI_2, 0.0, 0.0, 0.0],
        };
        let defl = DeflationState::default();
        assert!((cost(&params, &g, &defl).unwrap() + 0.7).abs() < 1e-10);

        let defl = DeflationState {
            found: vec![FoundState {
                value: -0.7,
                psi: ground.clone(),
                params: params.clone(),
            }],
            alphas: vec![2.0],
            ..Default::default()
        };
        assert!((cost(&params, &g, &defl).unwrap() - (-0.7 + 2.0)).abs() < 1e-10);

        let zero = build_g_tilde_from(&ComplexMatrix::zeros(2, 2)).unwrap();
        let c = cost(&params, &zero, &defl).unwrap();
        assert!((c - 2.0).abs() < 1e-10);
    }

    #[test]
    fn overlap_examples() {
        let a = random_unit_vector(8, &mut seeded(5));
        let b = random_unit_vector(8, &mut seeded(6));
        assert!((overlap(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((overlap(&a, &b).unwrap() - a.dotc(&b).norm_sqr()).abs() < 1e-10);
        let mut e0 = DVector::zeros(8);
        e0[0] = c64(1.0, 0.0);
        let mut e1 = DVector::zeros(8);
        e1[1] = c64(1.0, 0.0);
        assert!(overlap(&e0, &e1).unwrap().abs() < 1e-15);
    }

    #[test]
    fn vqd_recovers_diagonal_case() {
        let g = build_g_tilde(&diag_state(&[0.7, 0.3])).unwrap();
        let defl = vqd_solve(&g, 2, &VqdConfig::default(), 7).unwrap();
        assert!((defl.found[0].value + 0.7).abs() < 1e-2);
        assert!((defl.found[1].value + 0.3).abs() < 1e-2);
        assert!(overlap(&defl.found[0].psi, &defl.found[1].psi).unwrap() <= 1e-2);
        assert!(defl.lowest_cost >= -0.7 - 1e-10);
        assert!(defl.warnings.is_empty());
    }

    #[test]
    fn vqd_single_stage_respects_rayleigh_bound() {
        let rho = random_density(4, &mut seeded(8));
        let g = build_g_tilde_from(&rho).unwrap();
        let defl = vqd_solve(&g, 1, &VqdConfig::default(), 9).unwrap();
        let max_diag = (0..4).map(|i| rho[(i, i)].re).fold(0.0, f64::max);
        assert!(-defl.found[0].value >= max_diag - 1e-2);
    }

    #[test]
    fn deflated_cost_is_bounded_by_the_next_value() {
        // With the exact ground state deflated and α above the gap, no
        // parameter setting goes below −σ₂.
        let rho = random_density(2, &mut seeded(10));
        let g = build_g_tilde_from(&rho).unwrap();
        let eig = eig_hermitian(&g.g_tilde).unwrap();
        let ground = eig.eigenvectors.column(0).into_owned();
        let defl = DeflationState {
            found: vec![FoundState {
                value: eig.eigenvalues[0],
                psi: ground,
                params: AnsatzParams::zeros(3, 2),
            }],
            alphas: vec![2.0],
            ..Default::default()
        };
        let mut rng = seeded(11);
        let mut best = f64::INFINITY;
        for _ in 0..5000 {
            let p = AnsatzParams::random(3, 2, &mut rng);
            let c = cost(&p, &g, &defl).unwrap();
            assert!(c >= eig.eigenvalues[1] - 1e-9);
            best = best.min(c);
        }
        let cfg = VqdConfig::default();
        let objective = |x: &[f64]| {
            cost(&AnsatzParams { layers: 3, thetas: x.to_vec() }, &g, &defl).unwrap()
        };
        let (_, fx) = minimize(&objective, AnsatzParams::random(3, 2, &mut rng).thetas, &cfg);
        assert!((fx - eig.eigenvalues[1]).abs() < 1e-6, "{fx} vs {}", eig.eigenvalues[1]);
        assert!(best >= fx - 1e-9);
    }

    #[test]
    fn singular_pairs_on_the_diagonal_case() {
        let m = TcaMatrices::from_kernel(RealMatrix::identity(2, 2), 1, 1, 1.0).unwrap();
        let g = build_g_tilde(&diag_state(&[0.7, 0.3])).unwrap();
        let defl = vqd_solve(&g, 1, &VqdConfig::default(), 12).unwrap();
        let model = extract_singular_pairs(&defl, &m, 1.0).unwrap();
        let expected = map_to_g_eigenvectors(&m.a_inv_sqrt().unwrap(), [DVector::from_vec(vec![1.0, 0.0])]);
        assert!(model.w.column(0).dot(&expected.column(0)).abs() >= 0.99);
        assert!(model.eigenvalues[0] > 0.0);
    }

    #[test]
    fn degenerate_split_is_reported() {
        let m = TcaMatrices::from_kernel(RealMatrix::identity(2, 2), 1, 1, 1.0).unwrap();
        let mut psi = DVector::zeros(4);
        psi[0] = c64(1.0, 0.0);
        let defl = DeflationState {
            found: vec![FoundState {
                value: 0.0,
                psi,
                params: AnsatzParams::zeros(0, 2),
            }],
            alphas: vec![2.0],
            ..Default::default()
        };
        assert!(matches!(
            extract_singular_pairs(&defl, &m, 1.0),
            Err(Error::DegenerateSplit { index: 0, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn cost_never_goes_below_the_ground_value(seed in 0u64..1000) {
            let rho = random_density(4, &mut seeded(seed));
            let g = build_g_tilde_from(&rho).unwrap();
            let sigma = block_singular_values(&g).unwrap()[0];
            let p = AnsatzParams::random(3, 3, &mut seeded(seed + 1));
            let c = cost(&p, &g, &DeflationState::default()).unwrap();
            prop_assert!(c >= -sigma - 1e-10);
            let psi = ansatz_prepare(&p, 3).unwrap();
            let direct = psi.dotc(&(&g.g_tilde * &psi)).re;
            prop_assert!((c - direct).abs() < 1e-6);
        }
    }
}

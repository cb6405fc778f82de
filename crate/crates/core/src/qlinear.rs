//! Linear-algebra qTCA: the chain `ρ₀ → ρ_H → ρ_B` and `ρ₀ → ρ_L → ρ_{A₁}`
//! built from repeated `U₁` applications, the symmetric inverse square root
//! of `A` around `ρ_B` giving `ρ_G ∝ A^{-1/2} B A^{-1/2}`, and a qPCA readout
//! of its dominant eigenpairs.
//!
//! Each prepared state carries the trace of the operator it encodes, tracked
//! through post-selection probabilities and rotation constants. Multiplying
//! a normalized spectrum by that trace gives back the operator's spectrum.

use nalgebra::DVector;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::error::{Error, Result, StageExt};
use crate::numerics::{
    c64, eig_hermitian, next_pow2_qubits, to_complex, trace, zero_pad, ComplexMatrix, RealMatrix, C64,
    INV_CUTOFF_REL, PSD_CLIP,
};
use crate::qsim::{u1_apply, DensityState, EvolutionSpec, SimMode, SpectralFn, Spectrum};
use crate::tca::{build_centering, map_to_g_eigenvectors, mmd_sqrt_coefficient, TcaMatrices, TcaModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearConfig {
    pub mode: SimMode,
    pub clock_qubits: usize,
    /// DME steps per clock increment in the qPCA controlled evolutions.
    pub dme_slices: usize,
    /// Product-formula slices per clock increment for `e^{-iAt}`.
    pub trotter_slices: usize,
    /// Index qubits beyond the minimum needed for the data.
    pub extra_qubits: usize,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            mode: SimMode::Exact,
            clock_qubits: 8,
            dme_slices: DEFAULT_DME_SLICES,
            trotter_slices: 4,
            extra_qubits: 0,
        }
    }
}

pub const DEFAULT_DME_SLICES: usize = 1 << 20;

/// Index register holding `support` data points in its leading basis states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexSpace {
    pub support: usize,
    pub qubits: usize,
}

impl IndexSpace {
    pub fn new(support: usize, extra_qubits: usize) -> Self {
        Self {
            support,
            qubits: next_pow2_qubits(support) + extra_qubits,
        }
    }

    pub fn dim(&self) -> usize {
        1 << self.qubits
    }

    pub fn embed(&self, m: &RealMatrix) -> ComplexMatrix {
        zero_pad(&to_complex(m), self.dim())
    }

    pub fn projector(&self) -> ComplexMatrix {
        self.embed(&RealMatrix::identity(self.support, self.support))
    }

    pub fn support_block(&self, m: &ComplexMatrix) -> ComplexMatrix {
        m.view((0, 0), (self.support, self.support)).into_owned()
    }

    fn check(&self, m: &RealMatrix) -> Result<()> {
        if m.nrows() != self.support || m.ncols() != self.support {
            return Err(Error::Dimension(format!(
                "{}x{} operator on a support of {}",
                m.nrows(),
                m.ncols(),
                self.support
            )));
        }
        Ok(())
    }
}

/// A normalized state together with the trace of the operator it encodes.
#[derive(Debug, Clone)]
pub struct EncodedOperator {
    pub state: DensityState,
    pub trace: f64,
}

impl EncodedOperator {
    pub fn operator(&self) -> ComplexMatrix {
        self.state.matrix().scale(self.trace)
    }

    /// `ρ₀ = I/n` on the support, encoding the identity.
    pub fn identity(space: &IndexSpace) -> Result<Self> {
        Ok(Self {
            state: DensityState::from_index_operator(&space.projector())?,
            trace: space.support as f64,
        })
    }
}

/// `U₁(M, f)` on an encoded operator `X`, giving `f(M) X f(M)†`.
fn push(
    input: &EncodedOperator,
    parts: Vec<ComplexMatrix>,
    bound: f64,
    f: SpectralFn,
    cfg: &LinearConfig,
) -> Result<EncodedOperator> {
    // Signed decoding: sidelobes of eigenvalues just above zero land on the
    // top clock values, which must read as small negatives, not as `bound`.
    let mut spec = EvolutionSpec::from_parts(parts).with_clock(cfg.clock_qubits, bound, Spectrum::Signed);
    spec.trotter_slices = cfg.trotter_slices;
    let gamma = f.gamma(spec.decoded_range());
    let state = u1_apply(&input.state, &spec, f, cfg.mode)?;
    let p = state.success_probability() / input.state.success_probability();
    Ok(EncodedOperator {
        trace: input.trace * p / (gamma * gamma),
        state,
    })
}

fn positive_trace(k: &RealMatrix) -> Result<f64> {
    let tr = k.trace();
    if !(tr > 0.0) {
        return Err(Error::Parameter(format!("kernel trace {tr} must be positive")));
    }
    Ok(tr)
}

/// `ρ_H ∝ H` from the maximally mixed state.
pub fn prepare_rho_h(space: &IndexSpace, cfg: &LinearConfig) -> Result<EncodedOperator> {
    let h = space.embed(&build_centering(space.support));
    push(&EncodedOperator::identity(space)?, vec![h], 1.0, SpectralFn::Identity, cfg)
}

/// `ρ_B ∝ KHK` from `ρ_H`.
pub fn prepare_rho_b(
    rho_h: &EncodedOperator,
    k: &RealMatrix,
    space: &IndexSpace,
    cfg: &LinearConfig,
) -> Result<EncodedOperator> {
    space.check(k)?;
    push(rho_h, vec![space.embed(k)], positive_trace(k)?, SpectralFn::Identity, cfg)
}

/// States for the `A = KLK + μI` side of the problem.
#[derive(Debug, Clone)]
pub struct AOperators {
    /// `∝ L`
    pub rho_l: EncodedOperator,
    /// `∝ KLK`
    pub rho_a1: EncodedOperator,
    /// `∝ KLK + μI` on the support.
    pub rho_a: EncodedOperator,
    pub mu: f64,
}

impl AOperators {
    /// The two commuting-by-construction terms `A₁` and `μI` whose product
    /// formula drives `e^{-iAt}`.
    pub fn hamiltonian_parts(&self, space: &IndexSpace) -> Vec<ComplexMatrix> {
        vec![self.rho_a1.operator(), space.projector().scale(self.mu)]
    }
}

pub fn prepare_rho_a(
    k: &RealMatrix,
    n_s: usize,
    n_t: usize,
    mu: f64,
    space: &IndexSpace,
    cfg: &LinearConfig,
) -> Result<AOperators> {
    space.check(k)?;
    if n_s == 0 || n_t == 0 || n_s + n_t != space.support {
        return Err(Error::Dimension(format!(
            "domain sizes {n_s} + {n_t} do not match support {}",
            space.support
        )));
    }
    if !(mu >= 0.0) {
        return Err(Error::Parameter(format!("mu = {mu} must be non-negative")));
    }
    let l_sqrt = crate::tca::build_mmd_matrix(n_s, n_t).scale(mmd_sqrt_coefficient(n_s, n_t));
    let rho_l = push(
        &EncodedOperator::identity(space)?,
        vec![space.embed(&l_sqrt)],
        l_sqrt.trace(),
        SpectralFn::Identity,
        cfg,
    )?;
    let rho_a1 = push(&rho_l, vec![space.embed(k)], positive_trace(k)?, SpectralFn::Identity, cfg)?;
    let a = rho_a1.operator() + space.projector().scale(mu);
    let trace_a = trace(&a).re;
    let state = DensityState::from_index_operator(&a)?;
    let rho_a = EncodedOperator { state, trace: trace_a };
    Ok(AOperators {
        rho_l,
        rho_a1,
        rho_a,
        mu,
    })
}

/// `ρ_G ∝ A^{-1/2} B A^{-1/2}`, Hermitian and similar to `G = A⁻¹B`.
pub fn prepare_rho_g(
    rho_b: &EncodedOperator,
    a: &AOperators,
    space: &IndexSpace,
    cfg: &LinearConfig,
) -> Result<EncodedOperator> {
    let parts = a.hamiltonian_parts(space);
    let eig = eig_hermitian(&space.support_block(&(&parts[0] + &parts[1])))?;
    let lo = eig.eigenvalues[0];
    if lo < INV_CUTOFF_REL * eig.max_abs() || a.mu <= 0.0 {
        return Err(Error::Singularity { eigenvalue: lo });
    }
    push(rho_b, parts, a.rho_a.trace, SpectralFn::InverseSqrt { floor: a.mu }, cfg)
}

#[derive(Debug, Clone)]
pub struct PreparedOperators {
    pub space: IndexSpace,
    pub mode: SimMode,
    pub rho_h: EncodedOperator,
    pub rho_b: EncodedOperator,
    pub a: AOperators,
    pub rho_g: EncodedOperator,
}

impl PreparedOperators {
    /// Product of post-selection probabilities along `ρ₀ → ρ_H → ρ_B → ρ_G`.
    pub fn cumulative_success(&self) -> f64 {
        self.rho_g.state.success_probability()
    }
}

pub fn prepare_operators(m: &TcaMatrices, cfg: &LinearConfig) -> Result<PreparedOperators> {
    let space = IndexSpace::new(m.n(), cfg.extra_qubits);
    let rho_h = prepare_rho_h(&space, cfg).stage("rho_H")?;
    let rho_b = prepare_rho_b(&rho_h, &m.k, &space, cfg).stage("rho_B")?;
    let a = prepare_rho_a(&m.k, m.n_s, m.n_t, m.mu, &space, cfg).stage("rho_A")?;
    let rho_g = prepare_rho_g(&rho_b, &a, &space, cfg).stage("rho_G")?;
    Ok(PreparedOperators {
        space,
        mode: cfg.mode,
        rho_h,
        rho_b,
        a,
        rho_g,
    })
}

/// Clock outcome attributed to one recovered eigenpair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockReadout {
    pub value: usize,
    pub clock_qubits: usize,
    /// Total probability of the clock outcomes attributed to this eigenpair.
    pub mass: f64,
}

impl ClockReadout {
    pub fn bits(&self) -> String {
        format!("{:0width$b}", self.value, width = self.clock_qubits)
    }
}

#[derive(Debug, Clone)]
pub struct QpcaResult {
    /// Eigenvalues of the normalized state, descending.
    pub eigenvalues: Vec<f64>,
    /// Unit eigenvectors restricted to the index support, phase-canonical.
    pub eigenvectors: Vec<DVector<C64>>,
    /// Empty when the spectrum was read by a dense eigensolver.
    pub clock_readouts: Vec<ClockReadout>,
    /// Selected eigenvalues could not be told apart.
    pub degenerate: bool,
}

fn support_eig(rho: &DensityState, support: usize, d: usize) -> Result<crate::numerics::HermitianEig<C64>> {
    let dim = rho.dim();
    if support == 0 || support > dim {
        return Err(Error::Dimension(format!("support {support} on a {dim}-dimensional register")));
    }
    if d == 0 || d > support {
        return Err(Error::Parameter(format!("d = {d} outside 1..={support}")));
    }
    let m = rho.matrix();
    let inside: f64 = (0..support).map(|i| m[(i, i)].re).sum();
    if (1.0 - inside).abs() > 1e-10 {
        return Err(Error::Parameter(format!(
            "state has weight {:e} outside the index support",
            1.0 - inside
        )));
    }
    eig_hermitian(&m.view((0, 0), (support, support)).into_owned())
}

/// Reference readout by dense diagonalization.
pub fn dense_eigensolve(rho: &DensityState, support: usize, d: usize) -> Result<QpcaResult> {
    let eig = support_eig(rho, support, d)?;
    let order: Vec<usize> = (0..support).rev().take(d).collect();
    let degenerate = d < support
        && (eig.eigenvalues[support - d] - eig.eigenvalues[support - d - 1]).abs() <= 1e-12;
    Ok(QpcaResult {
        eigenvalues: order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect(),
        eigenvectors: order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect(),
        clock_readouts: Vec::new(),
        degenerate,
    })
}

const MASS_TIE: f64 = 1e-6;

/// Phase estimation of `e^{iρt₀}` run on `ρ` itself.
///
/// With `slices = Some(l)` each controlled `e^{iρt₀}` is built from `l`
/// controlled DME steps consuming fresh copies of `ρ`; `None` uses the exact
/// unitary. Every clock outcome leaves the index register in a state
/// diagonal in `ρ`'s eigenbasis, so outcomes are grouped by eigencomponent:
/// each component's total probability estimates its eigenvalue weight and
/// its most likely clock value is the eigenvalue readout.
pub fn qpca_eigensolve(
    rho: &DensityState,
    support: usize,
    d: usize,
    slices: Option<usize>,
    clock_qubits: usize,
) -> Result<QpcaResult> {
    let eig = support_eig(rho, support, d)?;
    if slices == Some(0) {
        return Err(Error::Parameter("DME needs at least one slice".into()));
    }
    if clock_qubits == 0 || clock_qubits > 16 {
        return Err(Error::Parameter(format!("{clock_qubits} clock qubits outside 1..=16")));
    }
    let lambda: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let spec = EvolutionSpec::new(ComplexMatrix::zeros(1, 1)).with_clock(clock_qubits, 1.0, Spectrum::NonNegative);
    let weights = clock_weights(&lambda, clock_qubits, spec.scale, slices);

    let components: Vec<ClockReadout> = (0..support)
        .map(|i| {
            let (value, _) = weights
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, w)| if w[i] > best.1 { (j, w[i]) } else { best });
            ClockReadout {
                value,
                clock_qubits,
                mass: weights.iter().map(|w| w[i]).sum(),
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..support).collect();
    order.sort_by(|&a, &b| {
        components[b]
            .value
            .cmp(&components[a].value)
            .then(components[b].mass.total_cmp(&components[a].mass))
    });
    let selected = &order[..d];

    let mut degenerate = false;
    let mut pairs = Vec::new();
    for (x, &a) in selected.iter().enumerate() {
        for &b in &order[x + 1..] {
            let (ca, cb) = (components[a], components[b]);
            if ca.value != cb.value || cb.mass <= PSD_CLIP {
                continue;
            }
            if (ca.mass - cb.mass).abs() <= MASS_TIE {
                degenerate = true;
            } else {
                pairs.push((a.min(b), a.max(b)));
            }
        }
    }
    if !pairs.is_empty() {
        return Err(Error::Precision { clock_qubits, pairs });
    }
    if degenerate {
        log::warn!("qPCA readout: selected eigenvalues share a clock value and cannot be ordered");
    }
    Ok(QpcaResult {
        eigenvalues: selected.iter().map(|&i| spec.decode(components[i].value)).collect(),
        eigenvectors: selected.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect(),
        clock_readouts: selected.iter().map(|&i| components[i]).collect(),
        degenerate,
    })
}

/// Per-clock-bit action of the controlled evolution on one diagonal block of
/// the joint clock–index state.
struct BitAction {
    ket: Vec<C64>,
    bra: Vec<C64>,
    /// Weight kept when both sides are controlled; the rest is replaced by
    /// `tr(X)·ρ`.
    both_keep: f64,
}

fn bit_actions(lambda: &[f64], clock_qubits: usize, scale: f64, slices: Option<usize>) -> Vec<BitAction> {
    (0..clock_qubits)
        .map(|q| {
            let increments = (1u64 << q) as f64;
            match slices {
                None => {
                    let ket: Vec<C64> = lambda
                        .iter()
                        .map(|&l| C64::from_polar(1.0, l * scale * increments))
                        .collect();
                    let bra = ket.iter().map(|z| z.conj()).collect();
                    BitAction {
                        ket,
                        bra,
                        both_keep: 1.0,
                    }
                }
                Some(l) => {
                    // Controlled e^{iρt₀} as l steps of e^{-iSΔt} with Δt = −t₀/l.
                    let dt = -scale / l as f64;
                    let steps = increments * l as f64;
                    let (c, s) = (dt.cos(), dt.sin());
                    let power = |z: C64| C64::from_polar(z.norm().powf(steps), z.arg() * steps);
                    BitAction {
                        ket: lambda.iter().map(|&x| power(c64(c, -s * x))).collect(),
                        bra: lambda.iter().map(|&x| power(c64(c, s * x))).collect(),
                        both_keep: (c * c).powf(steps),
                    }
                }
            }
        })
        .collect()
}

/// Clock distribution split by eigencomponent: `w[j][i]` is the probability
/// of reading clock value `j` with the index register in eigenvector `i`.
///
/// The joint state is handled as `T × T` clock blocks, each diagonal in the
/// eigenbasis of `ρ`. Rows of blocks are transformed and reduced
/// independently, so memory stays at `O(T·n)` per row.
fn clock_weights(lambda: &[f64], clock_qubits: usize, scale: f64, slices: Option<usize>) -> Vec<Vec<f64>> {
    let n = lambda.len();
    let big_t = 1usize << clock_qubits;
    let actions = bit_actions(lambda, clock_qubits, scale, slices);
    let inverse = FftPlanner::<f64>::new().plan_fft_inverse(big_t);
    let norm = 1.0 / (big_t as f64).sqrt();
    let lambda_c: Vec<C64> = lambda.iter().map(|&l| c64(l, 0.0)).collect();

    let total = (0..big_t)
        .into_par_iter()
        .map(|tau| {
            // Row τ of blocks, laid out as [i][τ'].
            let mut row = vec![c64(0.0, 0.0); n * big_t];
            let mut x = vec![c64(0.0, 0.0); n];
            for tau_b in 0..big_t {
                x.copy_from_slice(&lambda_c);
                for (q, act) in actions.iter().enumerate() {
                    match ((tau >> q) & 1, (tau_b >> q) & 1) {
                        (1, 1) => {
                            if act.both_keep < 1.0 {
                                let sum: C64 = x.iter().sum();
                                let leak = sum * (1.0 - act.both_keep);
                                for (xi, &li) in x.iter_mut().zip(lambda) {
                                    *xi = *xi * act.both_keep + leak * li;
                                }
                            }
                        }
                        (1, 0) => x.iter_mut().zip(&act.ket).for_each(|(xi, k)| *xi *= k),
                        (0, 1) => x.iter_mut().zip(&act.bra).for_each(|(xi, b)| *xi *= b),
                        _ => {}
                    }
                }
                for i in 0..n {
                    row[i * big_t + tau_b] = x[i] / big_t as f64;
                }
            }
            // (Z F†)_{τ j} by an inverse FFT over τ', then the F_{jτ} factor.
            let mut contrib = vec![vec![c64(0.0, 0.0); n]; big_t];
            for i in 0..n {
                let chunk = &mut row[i * big_t..(i + 1) * big_t];
                inverse.process(chunk);
                for (j, c) in contrib.iter_mut().enumerate() {
                    let f = C64::from_polar(norm, -2.0 * std::f64::consts::PI * ((j * tau) % big_t) as f64 / big_t as f64);
                    c[i] = f * chunk[j] * norm;
                }
            }
            contrib
        })
        .reduce(
            || vec![vec![c64(0.0, 0.0); n]; big_t],
            |mut a, b| {
                for (ra, rb) in a.iter_mut().zip(b) {
                    for (x, y) in ra.iter_mut().zip(rb) {
                        *x += y;
                    }
                }
                a
            },
        );
    total
        .into_iter()
        .map(|row| row.into_iter().map(|z| z.re.max(0.0)).collect())
        .collect()
}

/// Maps index-register eigenvectors of `A^{-1/2}BA^{-1/2}` to eigenvectors of
/// `G` and rescales normalized eigenvalues by `trace_scale = tr(G)`.
pub fn assemble_w(res: &QpcaResult, m: &TcaMatrices, trace_scale: f64) -> Result<TcaModel> {
    let n = m.n();
    let mut vectors = Vec::with_capacity(res.eigenvectors.len());
    for v in &res.eigenvectors {
        if v.len() != n {
            return Err(Error::Dimension(format!("eigenvector of length {} for n = {n}", v.len())));
        }
        let worst = v.iter().fold(0.0f64, |acc, z| acc.max(z.im.abs()));
        if worst > 1e-8 {
            return Err(Error::Numerical(format!("eigenvector has imaginary part {worst:e}")));
        }
        vectors.push(v.map(|z| z.re));
    }
    Ok(TcaModel {
        w: map_to_g_eigenvectors(&m.a_inv_sqrt()?, vectors),
        eigenvalues: res.eigenvalues.iter().map(|&l| l * trace_scale).collect(),
        degenerate_cut: res.degenerate,
    })
}

/// Output of the full linear pipeline.
#[derive(Debug, Clone)]
pub struct LinearSolution {
    pub operators: PreparedOperators,
    pub readout: QpcaResult,
    pub model: TcaModel,
}

pub fn solve_linear(m: &TcaMatrices, d: usize, cfg: &LinearConfig) -> Result<LinearSolution> {
    let operators = prepare_operators(m, cfg)?;
    let rho_g = &operators.rho_g;
    let readout = match cfg.mode {
        SimMode::Exact => dense_eigensolve(&rho_g.state, m.n(), d),
        SimMode::Circuit => qpca_eigensolve(&rho_g.state, m.n(), d, Some(cfg.dme_slices), cfg.clock_qubits),
    }
    .stage("qPCA")?;
    let model = assemble_w(&readout, m, rho_g.trace)?;
    Ok(LinearSolution {
        operators,
        readout,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{kron, partial_trace, rel_frobenius, trace_distance, Subsystem};
    use crate::qsim::swap_operator;
    use crate::random::{random_density, random_hermitian, random_psd, random_real_matrix, seeded};
    use crate::tca::{build_mmd_matrix, solve_tca, Kernel, TcaConfig};
    use proptest::prelude::*;

    fn exact() -> LinearConfig {
        LinearConfig::default()
    }

    fn normalized(m: &ComplexMatrix) -> ComplexMatrix {
        m.unscale(trace(m).re)
    }

    fn instance(seed: u64, n_s: usize, n_t: usize, mu: f64) -> TcaMatrices {
        let mut rng = seeded(seed);
        let x = random_real_matrix(3, n_s + n_t, &mut rng);
        let k = crate::tca::kernel_matrix(&x, Kernel::Linear).unwrap();
        TcaMatrices::from_kernel(k, n_s, n_t, mu).unwrap()
    }

    #[test]
    fn rho_h_examples() {
        let space = IndexSpace::new(2, 0);
        let rho_h = prepare_rho_h(&space, &exact()).unwrap();
        let expected = to_complex(&nalgebra::dmatrix![0.5, -0.5; -0.5, 0.5]);
        assert!(rel_frobenius(rho_h.state.matrix(), &expected) < 1e-10);
        // ρ₀ = I/2: tr(HρH) = tr(H)/2, scaled by γ² where γ = 1/(largest
        // decodable magnitude) = 1 − 2^{-(t-1)} for bound 1.
        let gamma = 1.0 - 0.5f64.powi(exact().clock_qubits as i32 - 1);
        assert!((rho_h.state.success_probability() - 0.5 * gamma * gamma).abs() < 1e-12);
        assert!((rho_h.trace - 1.0).abs() < 1e-12);

        let err = prepare_rho_h(&IndexSpace::new(1, 0), &exact()).unwrap_err();
        assert!(matches!(err, Error::PostSelection { .. }));
    }

    #[test]
    fn rho_h_is_exact_in_circuit_mode() {
        // H has eigenvalues 0 and 1, both on the clock grid.
        let cfg = LinearConfig {
            mode: SimMode::Circuit,
            clock_qubits: 4,
            ..exact()
        };
        let space = IndexSpace::new(5, 0);
        let rho_h = prepare_rho_h(&space, &cfg).unwrap();
        let h = space.embed(&build_centering(5));
        assert!(trace_distance(rho_h.state.matrix(), &normalized(&h)).unwrap() < 1e-10);
    }

    #[test]
    fn circuit_rho_b_converges_with_near_zero_kernel_eigenvalues() {
        // An rbf Gram matrix has many eigenvalues just above zero; their phase
        // estimation sidelobes must not wrap to the top of the clock.
        let x = random_real_matrix(2, 8, &mut seeded(31));
        let k = crate::tca::kernel_matrix(&x, Kernel::Rbf { bandwidth: None }).unwrap();
        let space = IndexSpace::new(8, 0);
        let exact_b = prepare_rho_b(&prepare_rho_h(&space, &exact()).unwrap(), &k, &space, &exact()).unwrap();
        let errs: Vec<f64> = [6, 8, 10]
            .iter()
            .map(|&t| {
                let cfg = LinearConfig {
                    mode: SimMode::Circuit,
                    clock_qubits: t,
                    ..exact()
                };
                let b = prepare_rho_b(&prepare_rho_h(&space, &cfg).unwrap(), &k, &space, &cfg).unwrap();
                trace_distance(b.state.matrix(), exact_b.state.matrix()).unwrap()
            })
            .collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
        assert!(errs[2] < 0.05, "{errs:?}");
    }

    #[test]
    fn rho_b_examples() {
        let space = IndexSpace::new(2, 0);
        let rho_h = prepare_rho_h(&space, &exact()).unwrap();
        let rho_b = prepare_rho_b(&rho_h, &RealMatrix::identity(2, 2), &space, &exact()).unwrap();
        assert!(rel_frobenius(rho_b.state.matrix(), rho_h.state.matrix()) < 1e-12);

        let k = nalgebra::dmatrix![2.0, 0.0; 0.0, 1.0];
        let rho_b = prepare_rho_b(&rho_h, &k, &space, &exact()).unwrap();
        let khk = to_complex(&nalgebra::dmatrix![2.0, -1.0; -1.0, 0.5]);
        assert!(rel_frobenius(rho_b.state.matrix(), &normalized(&khk)) < 1e-10);
        assert!((rho_b.trace - 2.5).abs() < 1e-10);
    }

    #[test]
    fn rho_a_examples() {
        let space = IndexSpace::new(4, 0);
        let a = prepare_rho_a(&RealMatrix::identity(4, 4), 2, 2, 0.5, &space, &exact()).unwrap();
        let l = to_complex(&build_mmd_matrix(2, 2));
        assert!(rel_frobenius(a.rho_l.state.matrix(), &normalized(&l)) < 1e-10);
        assert!(rel_frobenius(a.rho_a1.state.matrix(), &normalized(&l)) < 1e-10);
        assert!((a.rho_a1.trace - 1.0).abs() < 1e-10);
    }

    #[test]
    fn trotterized_a_evolution_is_exact() {
        let m = instance(5, 3, 3, 0.8);
        let space = IndexSpace::new(6, 0);
        let a = prepare_rho_a(&m.k, 3, 3, 0.8, &space, &exact()).unwrap();
        let parts = a.hamiltonian_parts(&space);
        let exact_u = crate::numerics::expm_hermitian(&(&parts[0] + &parts[1]), 0.9).unwrap();
        for k in [1, 3] {
            let spec = EvolutionSpec::from_parts(parts.clone()).with_time(0.9, k);
            let u = crate::qsim::trotter_evolve(&spec).unwrap();
            assert!((u - &exact_u).norm() < 1e-10);
        }
    }

    #[test]
    fn rho_g_examples() {
        // B = A gives I/n.
        let space = IndexSpace::new(4, 0);
        let cfg = exact();
        let k = random_psd(4, 4, &mut seeded(3));
        let a = prepare_rho_a(&k, 2, 2, 0.7, &space, &cfg).unwrap();
        let fake_b = a.rho_a.clone();
        let g = prepare_rho_g(&fake_b, &a, &space, &cfg).unwrap();
        let flat = ComplexMatrix::identity(4, 4).unscale(4.0);
        assert!(rel_frobenius(g.state.matrix(), &flat) < 1e-10);

        // K orthogonal to the MMD vector makes KLK = 0, so A = μI.
        let v = crate::tca::mmd_vector(2, 2);
        let p = RealMatrix::identity(4, 4) - (&v * v.transpose()).unscale(v.norm_squared());
        let k = &p * random_psd(4, 4, &mut seeded(4)) * &p;
        let rho_h = prepare_rho_h(&space, &cfg).unwrap();
        let rho_b = prepare_rho_b(&rho_h, &k, &space, &cfg).unwrap();
        let a = AOperators {
            rho_a1: EncodedOperator {
                state: a.rho_a1.state.clone(),
                trace: 0.0,
            },
            ..a
        };
        let g = prepare_rho_g(&rho_b, &a, &space, &cfg).unwrap();
        let khk = to_complex(&(&k * build_centering(4) * &k).unscale(0.7));
        assert!(rel_frobenius(g.state.matrix(), &normalized(&khk)) < 1e-10);
        assert!((g.trace - trace(&khk).re).abs() < 1e-10 * g.trace);
    }

    #[test]
    fn exact_pipeline_reproduces_g_spectrum_and_w() {
        for seed in 0..5 {
            let m = instance(seed, 3, 4, 1.0);
            let sol = solve_linear(&m, 2, &exact()).unwrap();
            let ops = &sol.operators;
            let eig = eig_hermitian(&ops.space.support_block(&ops.rho_g.operator())).unwrap();
            let classical = eig_hermitian(&m.similar_symmetric().unwrap()).unwrap();
            for (q, c) in eig.eigenvalues.iter().zip(classical.eigenvalues.iter()) {
                assert!((q - c).abs() <= 1e-8 * classical.max_abs(), "{q} vs {c}");
            }
            let model = solve_tca(&m, &TcaConfig { d: 2, ..Default::default() }).unwrap();
            for j in 0..2 {
                let fid = sol.model.w.column(j).dot(&model.w.column(j)).abs();
                assert!(fid >= 0.999, "{fid}");
                assert!((sol.model.eigenvalues[j] - model.eigenvalues[j]).abs() < 1e-8 * model.eigenvalues[0]);
            }
        }
    }

    #[test]
    fn success_decreases_along_the_chain() {
        let m = instance(9, 4, 3, 1.0);
        let ops = prepare_operators(&m, &exact()).unwrap();
        let s = [
            1.0,
            ops.rho_h.state.success_probability(),
            ops.rho_b.state.success_probability(),
            ops.cumulative_success(),
        ];
        assert!(s.windows(2).all(|w| w[1] <= w[0] && w[1] > 0.0), "{s:?}");
    }

    #[test]
    fn padding_does_not_change_exact_outputs() {
        let m = instance(13, 3, 3, 0.9);
        let base = solve_linear(&m, 2, &exact()).unwrap();
        for extra in 1..=2 {
            let cfg = LinearConfig {
                extra_qubits: extra,
                ..exact()
            };
            let padded = solve_linear(&m, 2, &cfg).unwrap();
            assert_eq!(padded.operators.space.dim(), 8 << extra);
            assert!((&padded.model.w - &base.model.w).norm() < 1e-10);
        }
    }

    #[test]
    fn dense_readout_diagonal_case() {
        let rho = DensityState::from_index_operator(&to_complex(&nalgebra::dmatrix![0.7, 0.0; 0.0, 0.3])).unwrap();
        let res = dense_eigensolve(&rho, 2, 1).unwrap();
        assert!((res.eigenvalues[0] - 0.7).abs() < 1e-14);
        assert!((res.eigenvectors[0][0].norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn qpca_diagonal_case_with_exact_evolution() {
        let rho = DensityState::from_index_operator(&to_complex(&nalgebra::dmatrix![0.7, 0.0; 0.0, 0.3])).unwrap();
        for t in [4, 6, 8] {
            let res = qpca_eigensolve(&rho, 2, 1, None, t).unwrap();
            let res_step = 1.0 / ((1u64 << t) as f64 - 1.0);
            assert!((res.eigenvalues[0] - 0.7).abs() <= res_step);
            assert!(res.eigenvectors[0][0].norm_sqr() >= 0.99);
            let total: f64 = qpca_eigensolve(&rho, 2, 2, None, t)
                .unwrap()
                .clock_readouts
                .iter()
                .map(|r| r.mass)
                .sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn qpca_flat_spectrum_is_degenerate() {
        let rho = DensityState::from_index_operator(&ComplexMatrix::identity(4, 4)).unwrap();
        let res = qpca_eigensolve(&rho, 4, 2, Some(64), 5).unwrap();
        assert!(res.degenerate);
        let r = &res.clock_readouts;
        assert_eq!(r[0].value, r[1].value);
    }

    #[test]
    fn qpca_reports_colliding_eigenvalues() {
        // Both 0.44 and 0.42 round to the clock value 3 of 7.
        let diag = nalgebra::dmatrix![0.44, 0.0, 0.0; 0.0, 0.42, 0.0; 0.0, 0.0, 0.14];
        let rho = DensityState::from_index_operator(&IndexSpace::new(3, 0).embed(&diag)).unwrap();
        let err = qpca_eigensolve(&rho, 3, 1, None, 3).unwrap_err();
        assert!(matches!(err, Error::Precision { clock_qubits: 3, .. }), "{err}");
    }

    #[test]
    fn qpca_full_support_matches_dense_spectrum() {
        let values = [0.45, 0.3, 0.17, 0.08];
        let q = eig_hermitian(&random_hermitian(4, &mut seeded(17))).unwrap().eigenvectors;
        let diag = ComplexMatrix::from_diagonal(&DVector::from_iterator(4, values.iter().map(|&x| c64(x, 0.0))));
        let rho = DensityState::from_index_operator(&(&q * diag * q.adjoint())).unwrap();
        let t = 8;
        let res = qpca_eigensolve(&rho, 4, 4, Some(DEFAULT_DME_SLICES), t).unwrap();
        let step = 1.0 / ((1u64 << t) as f64 - 1.0);
        for (got, want) in res.eigenvalues.iter().zip(values) {
            assert!((got - want).abs() <= step, "{got} vs {want}");
        }
        for (v, k) in res.eigenvectors.iter().zip(0..4) {
            let fid = v.dotc(&q.column(k)).norm_sqr();
            assert!(fid > 1.0 - 1e-10);
        }
    }

    /// Explicit joint simulation of DME-driven phase estimation: clock, index
    /// and a fresh copy of ρ per step, with controlled partial swaps and the
    /// copy traced out after each step.
    fn explicit_qpca(rho: &ComplexMatrix, t: usize, slices: usize, scale: f64) -> Vec<Vec<f64>> {
        let n = rho.nrows();
        let big_t = 1usize << t;
        let hadamard = {
            let h = ComplexMatrix::from_fn(big_t, big_t, |j, k| {
                let s = if (j & k).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                c64(s / (big_t as f64).sqrt(), 0.0)
            });
            kron(&h, &ComplexMatrix::identity(n, n))
        };
        let mut joint = ComplexMatrix::zeros(big_t * n, big_t * n);
        joint.view_mut((0, 0), (n, n)).copy_from(rho);
        joint = &hadamard * joint * hadamard.adjoint();

        let dt = -scale / slices as f64;
        let step = ComplexMatrix::identity(n * n, n * n).scale(dt.cos()) - swap_operator(n) * c64(0.0, dt.sin());
        for q in 0..t {
            let mut controlled = ComplexMatrix::zeros(big_t * n * n, big_t * n * n);
            for tau in 0..big_t {
                let block = if (tau >> q) & 1 == 1 {
                    step.clone()
                } else {
                    ComplexMatrix::identity(n * n, n * n)
                };
                controlled
                    .view_mut((tau * n * n, tau * n * n), (n * n, n * n))
                    .copy_from(&block);
            }
            for _ in 0..(1 << q) * slices {
                // The fresh copy is the second factor of the swapped pair.
                let with_copy = kron(&joint, rho);
                let evolved = &controlled * with_copy * controlled.adjoint();
                joint = partial_trace(&evolved, (big_t * n, n), Subsystem::Second).unwrap();
            }
        }
        let qft_dag = ComplexMatrix::from_fn(big_t, big_t, |j, k| {
            C64::from_polar(
                1.0 / (big_t as f64).sqrt(),
                -2.0 * std::f64::consts::PI * (j * k) as f64 / big_t as f64,
            )
        });
        let f = kron(&qft_dag, &ComplexMatrix::identity(n, n));
        let out = &f * joint * f.adjoint();
        let eig = eig_hermitian(rho).unwrap();
        (0..big_t)
            .map(|j| {
                let block = out.view((j * n, j * n), (n, n)).into_owned();
                (0..n)
                    .map(|i| {
                        let u = eig.eigenvectors.column(i);
                        (u.adjoint() * &block * u)[(0, 0)].re
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn block_engine_matches_explicit_controlled_dme() {
        let rho = random_density(2, &mut seeded(23));
        let eig = eig_hermitian(&rho).unwrap();
        let lambda: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let (t, slices, scale) = (2, 3, 2.0);
        let fast = clock_weights(&lambda, t, scale, Some(slices));
        let slow = explicit_qpca(&rho, t, slices, scale);
        for (a, b) in fast.iter().zip(&slow) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12, "{fast:?} vs {slow:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn exact_rho_b_matches_khk(seed in 0u64..200, n in 2usize..7) {
            let space = IndexSpace::new(n, 0);
            let k = random_psd(n, n, &mut seeded(seed));
            let rho_h = prepare_rho_h(&space, &exact()).unwrap();
            let rho_b = prepare_rho_b(&rho_h, &k, &space, &exact()).unwrap();
            let khk = space.embed(&(&k * build_centering(n) * &k));
            prop_assert!(rel_frobenius(rho_b.state.matrix(), &normalized(&khk)) < 1e-10);
            prop_assert!((rho_b.trace - trace(&khk).re).abs() < 1e-10 * rho_b.trace);
        }

        #[test]
        fn exact_rho_a_matches_klk(seed in 0u64..200, n_s in 1usize..4, n_t in 1usize..4) {
            let n = n_s + n_t;
            let space = IndexSpace::new(n, 0);
            let k = random_psd(n, n, &mut seeded(seed));
            let a = prepare_rho_a(&k, n_s, n_t, 0.3, &space, &exact()).unwrap();
            let klk = &k * build_mmd_matrix(n_s, n_t) * &k;
            let target = space.embed(&(&klk + RealMatrix::identity(n, n).scale(0.3)));
            prop_assert!(rel_frobenius(a.rho_a.state.matrix(), &normalized(&target)) < 1e-10);
            prop_assert!(rel_frobenius(&a.rho_a1.operator(), &space.embed(&klk)) < 1e-10);
        }
    }
}

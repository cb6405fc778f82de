//! Least-squares SVM on embedded source data: training by one linear solve
//! (dense or through the simulated matrix-inversion circuit) and prediction
//! through an interference estimate of the overlap between training and
//! query states.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::numerics::{
    c64, canonical_phase, eig_hermitian, next_pow2_qubits, to_complex, zero_pad, RealMatrix, C64,
    INV_CUTOFF_REL,
};
use crate::qsim::{interference_overlap, u1_apply, DensityState, EvolutionSpec, SimMode, SpectralFn, Spectrum};
use crate::tca::Label;

pub const DEFAULT_XI_INV: f64 = 1.0;
const TIE_TOL: f64 = 1e-12;

/// `F = [[0, 𝟏ᵀ], [𝟏, K + ξ⁻¹I]]` and `F̂ = F / tr F`.
#[derive(Debug, Clone, PartialEq)]
pub struct FMatrix {
    pub f: RealMatrix,
    pub f_hat: RealMatrix,
}

/// Linear-kernel system matrix for training points stored as columns.
pub fn build_f(xs: &RealMatrix, xi_inv: f64) -> Result<FMatrix> {
    let n = xs.ncols();
    if n == 0 {
        return Err(Error::Parameter("no training points".into()));
    }
    if !(xi_inv > 0.0) {
        return Err(Error::Parameter(format!("xi_inv = {xi_inv} must be positive")));
    }
    let gram = xs.transpose() * xs;
    let mut f = RealMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        f[(0, i + 1)] = 1.0;
        f[(i + 1, 0)] = 1.0;
        for j in 0..n {
            f[(i + 1, j + 1)] = gram[(i, j)];
        }
        f[(i + 1, i + 1)] += xi_inv;
    }
    let f_hat = f.unscale(f.trace());
    Ok(FMatrix { f, f_hat })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub b: f64,
    pub alpha: DVector<f64>,
    pub xi_inv: f64,
    pub training_points: RealMatrix,
    pub training_labels: Vec<Label>,
}

fn check_training(xs: &RealMatrix, ys: &[Label]) -> Result<()> {
    if xs.ncols() != ys.len() {
        return Err(Error::Dimension(format!(
            "{} training points with {} labels",
            xs.ncols(),
            ys.len()
        )));
    }
    if let Some(bad) = ys.iter().find(|&&y| y != 1 && y != -1) {
        return Err(Error::Validation(format!("label {bad} is not ±1")));
    }
    Ok(())
}

/// Right-hand side `(0, y)`.
fn rhs(ys: &[Label]) -> DVector<f64> {
    DVector::from_iterator(ys.len() + 1, std::iter::once(0.0).chain(ys.iter().map(|&y| f64::from(y))))
}

fn model_from(solution: &DVector<f64>, xs: &RealMatrix, ys: &[Label], xi_inv: f64) -> SvmModel {
    SvmModel {
        b: solution[0],
        alpha: solution.rows(1, ys.len()).into_owned(),
        xi_inv,
        training_points: xs.clone(),
        training_labels: ys.to_vec(),
    }
}

pub fn train_classical(xs: &RealMatrix, ys: &[Label], xi_inv: f64) -> Result<SvmModel> {
    check_training(xs, ys)?;
    let fm = build_f(xs, xi_inv)?;
    let y = rhs(ys);
    let solution = fm
        .f
        .clone()
        .lu()
        .solve(&y)
        .ok_or_else(|| Error::Conditioning("training matrix is singular".into()))?;
    let residual = (&fm.f * &solution - &y).norm();
    if !(residual <= 1e-10 * (1.0 + y.norm())) {
        return Err(Error::Conditioning(format!("training residual {residual:e}")));
    }
    Ok(model_from(&solution, xs, ys, xi_inv))
}

/// Trains through `U₁(F̂, 1/λ)` applied to `|0, y⟩`.
///
/// The post-selected state fixes the direction of `(b, α)`; its scale and
/// sign are recovered by least squares against the training equations.
pub fn train_quantum(
    xs: &RealMatrix,
    ys: &[Label],
    xi_inv: f64,
    clock_qubits: usize,
    mode: SimMode,
) -> Result<SvmModel> {
    check_training(xs, ys)?;
    let fm = build_f(xs, xi_inv)?;
    let n = ys.len() + 1;
    let side = 1 << next_pow2_qubits(n);
    let eig = eig_hermitian(&fm.f_hat)?;
    let floor = eig.eigenvalues.iter().fold(f64::INFINITY, |acc, l| acc.min(l.abs()));
    if floor < INV_CUTOFF_REL * eig.max_abs() {
        return Err(Error::Singularity { eigenvalue: floor });
    }
    let f_hat = zero_pad(&to_complex(&fm.f_hat), side);
    // Frobenius norm bounds the spectral radius.
    let spec = EvolutionSpec::new(f_hat).with_clock(clock_qubits, fm.f_hat.norm(), Spectrum::Signed);

    let y = rhs(ys);
    let y_state = DVector::from_iterator(side, (0..side).map(|i| c64(if i < n { y[i] } else { 0.0 }, 0.0)));
    let input = DensityState::pure(&y_state.unscale(y.norm()))?;
    let out = u1_apply(&input, &spec, SpectralFn::Inverse { floor }, mode)?;

    let out_eig = eig_hermitian(out.matrix())?;
    let mut direction: DVector<C64> = out_eig.eigenvectors.column(side - 1).into_owned();
    canonical_phase(&mut direction);
    let r = DVector::from_iterator(n, direction.iter().take(n).map(|z| z.re));
    let fr = &fm.f * &r;
    let scale = fr.dot(&y) / fr.norm_squared();
    Ok(model_from(&r.scale(scale), xs, ys, xi_inv))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub decision: f64,
    /// The decision value was within rounding of zero; the label defaults to +1.
    pub tie: bool,
}

impl Prediction {
    fn from_decision(decision: f64) -> Self {
        let tie = decision.abs() <= TIE_TOL;
        Self {
            label: if tie || decision > 0.0 { 1 } else { -1 },
            decision,
            tie,
        }
    }
}

fn check_query(model: &SvmModel, x: &DVector<f64>) -> Result<()> {
    if x.len() != model.training_points.nrows() {
        return Err(Error::Dimension(format!(
            "query of dimension {} for training points of dimension {}",
            x.len(),
            model.training_points.nrows()
        )));
    }
    Ok(())
}

/// `b + Σ αᵢ xᵢᵀx`.
pub fn predict_classical(model: &SvmModel, x: &DVector<f64>) -> Result<Prediction> {
    check_query(model, x)?;
    let kernel = model.training_points.transpose() * x;
    Ok(Prediction::from_decision(model.b + model.alpha.dot(&kernel)))
}

/// Query and training states on `index ⊗ data`, with the index register of
/// size `n_s + 1` and the data register of the embedding dimension.
///
/// Query: `|0⟩|0⟩ + Σ_k |x| |k⟩|x̂⟩`, squared norm `n_s|x|² + 1`.
/// Training: `b|0⟩|0⟩ + Σ_k α_k|x_k| |k⟩|x̂_k⟩`, squared norm
/// `b² + Σ α_k²|x_k|²`.
pub struct OverlapStates {
    pub query: DVector<C64>,
    pub training: DVector<C64>,
    pub query_norm_sq: f64,
    pub training_norm_sq: f64,
}

pub fn overlap_states(model: &SvmModel, x: &DVector<f64>) -> Result<OverlapStates> {
    check_query(model, x)?;
    let dim = x.len();
    let n_s = model.alpha.len();
    let x_norm = x.norm();
    if x_norm == 0.0 {
        return Err(Error::Normalization("query has zero norm".into()));
    }
    let size = (n_s + 1) * dim;
    let mut query = DVector::from_element(size, c64(0.0, 0.0));
    let mut training = DVector::from_element(size, c64(0.0, 0.0));
    query[0] = c64(1.0, 0.0);
    training[0] = c64(model.b, 0.0);
    for k in 0..n_s {
        for a in 0..dim {
            // |x| · x̂ = x, and likewise for the training points.
            query[(k + 1) * dim + a] = c64(x[a], 0.0);
            training[(k + 1) * dim + a] = c64(model.alpha[k] * model.training_points[(a, k)], 0.0);
        }
    }
    let query_norm_sq = n_s as f64 * x_norm * x_norm + 1.0;
    let training_norm_sq = training.norm_squared();
    if training_norm_sq == 0.0 {
        return Err(Error::Normalization("trained model state has zero norm".into()));
    }
    Ok(OverlapStates {
        query: query.unscale(query_norm_sq.sqrt()),
        training: training.unscale(training_norm_sq.sqrt()),
        query_norm_sq,
        training_norm_sq,
    })
}

/// Decision value `√(N_query N_training)·⟨training|query⟩`, with the signed overlap read from
/// a Hadamard-test interference circuit.
pub fn predict_swaptest(model: &SvmModel, x: &DVector<f64>) -> Result<Prediction> {
    let states = overlap_states(model, x)?;
    let overlap = interference_overlap(&states.training, &states.query)?;
    let decision = (states.query_norm_sq * states.training_norm_sq).sqrt() * overlap.re;
    Ok(Prediction::from_decision(decision))
}

/// Fraction of points whose predicted label matches.
pub fn accuracy(predictions: &[Prediction], labels: &[Label]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, &y)| p.label == y).count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::swap_test;
    use crate::random::{random_real_matrix, seeded};
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn two_point() -> (RealMatrix, Vec<Label>) {
        (RealMatrix::identity(2, 2), vec![1, -1])
    }

    #[test]
    fn f_examples() {
        let (xs, _) = two_point();
        let fm = build_f(&xs, 1.0).unwrap();
        assert_eq!(fm.f, dmatrix![0.0, 1.0, 1.0; 1.0, 2.0, 0.0; 1.0, 0.0, 2.0]);
        assert!((fm.f_hat.trace() - 1.0).abs() < 1e-15);
        let single = build_f(&RealMatrix::zeros(2, 1), 1.0).unwrap();
        assert_eq!(single.f, dmatrix![0.0, 1.0; 1.0, 1.0]);
    }

    #[test]
    fn two_point_model() {
        let (xs, ys) = two_point();
        let model = train_classical(&xs, &ys, 1.0).unwrap();
        assert!(model.b.abs() < 1e-12);
        assert!((model.alpha - dvector![0.5, -0.5]).norm() < 1e-12);
        let model = train_classical(&xs, &ys, 1.0).unwrap();
        let p = predict_classical(&model, &dvector![1.0, 0.0]).unwrap();
        assert!((p.decision - 0.5).abs() < 1e-12);
        assert_eq!(p.label, 1);
        let p = predict_swaptest(&model, &dvector![1.0, 0.0]).unwrap();
        assert!((p.decision - 0.5).abs() < 1e-12);
        for q in [dvector![0.0, 1.0], dvector![0.3, -2.0]] {
            let a = predict_classical(&model, &q).unwrap();
            let b = predict_swaptest(&model, &q).unwrap();
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn zero_query_and_orthogonal_query() {
        let xs = dmatrix![1.0, 0.5; 0.0, 0.0; 0.0, 0.0];
        let ys = vec![1, -1];
        let model = train_classical(&xs, &ys, 1.0).unwrap();
        let p = predict_classical(&model, &dvector![0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.decision, model.b);
        assert!(matches!(
            predict_swaptest(&model, &dvector![0.0, 0.0, 0.0]),
            Err(Error::Normalization(_))
        ));
        let p = predict_swaptest(&model, &dvector![0.0, 1.0, 0.0]).unwrap();
        assert!((p.decision - model.b).abs() < 1e-12);
    }

    #[test]
    fn flipped_labels_on_symmetric_data() {
        let xs = dmatrix![1.0, -1.0, 0.5; 0.3, -0.3, 2.0];
        let ys = vec![1, -1, 1];
        let flipped: Vec<Label> = ys.iter().map(|y| -y).collect();
        let a = train_classical(&xs, &ys, 1.0).unwrap();
        let b = train_classical(&xs, &flipped, 1.0).unwrap();
        assert!((a.b + b.b).abs() < 1e-12);
        assert!((&a.alpha + &b.alpha).norm() < 1e-12);
    }

    #[test]
    fn separable_training_points_keep_labels() {
        let mut rng = seeded(4);
        let mut xs = random_real_matrix(2, 10, &mut rng).scale(0.3);
        let ys: Vec<Label> = (0..10).map(|i| if i < 5 { 1 } else { -1 }).collect();
        for i in 0..10 {
            xs[(0, i)] += if i < 5 { 2.0 } else { -2.0 };
        }
        let model = train_classical(&xs, &ys, 0.01).unwrap();
        for (i, &y) in ys.iter().enumerate() {
            let p = predict_classical(&model, &xs.column(i).into_owned()).unwrap();
            assert_eq!(p.label, y);
        }
    }

    #[test]
    fn swap_test_magnitude_matches_interference() {
        let (xs, ys) = two_point();
        let model = train_classical(&xs, &ys, 1.0).unwrap();
        let s = overlap_states(&model, &dvector![0.8, 0.1]).unwrap();
        let p0 = swap_test(&s.training, &s.query).unwrap();
        let z = interference_overlap(&s.training, &s.query).unwrap();
        assert!((2.0 * p0 - 1.0 - z.norm_sqr()).abs() < 1e-12);
    }

    #[test]
    fn quantum_training_exact_mode() {
        for seed in 0..10 {
            let xs = random_real_matrix(2, 5, &mut seeded(seed));
            let ys: Vec<Label> = (0..5).map(|i| if (i + seed) % 2 == 0 { 1 } else { -1 }).collect();
            let c = train_classical(&xs, &ys, 1.0).unwrap();
            let q = train_quantum(&xs, &ys, 1.0, 8, SimMode::Exact).unwrap();
            let cv = DVector::from_iterator(6, std::iter::once(c.b).chain(c.alpha.iter().copied()));
            let qv = DVector::from_iterator(6, std::iter::once(q.b).chain(q.alpha.iter().copied()));
            let fid = (cv.dot(&qv) / (cv.norm() * qv.norm())).powi(2);
            assert!(1.0 - fid < 1e-8, "{fid}");
            assert!((cv - qv).norm() < 1e-8);
        }
    }

    #[test]
    fn quantum_training_circuit_mode_two_point() {
        let (xs, ys) = two_point();
        let c = train_classical(&xs, &ys, 1.0).unwrap();
        let q = train_quantum(&xs, &ys, 1.0, 8, SimMode::Circuit).unwrap();
        let cv = dvector![c.b, c.alpha[0], c.alpha[1]];
        let qv = dvector![q.b, q.alpha[0], q.alpha[1]];
        let fid = (cv.dot(&qv) / (cv.norm() * qv.norm())).powi(2);
        assert!(fid >= 0.99, "{fid}");
    }

    #[test]
    fn inverse_of_scaled_identity_keeps_direction() {
        let f_hat = crate::numerics::ComplexMatrix::identity(4, 4).unscale(4.0);
        let spec = EvolutionSpec::new(f_hat).with_clock(6, 0.25, Spectrum::Signed);
        let y = dvector![c64(0.0, 0.0), c64(1.0, 0.0), c64(-1.0, 0.0), c64(1.0, 0.0)].unscale(3f64.sqrt());
        let input = DensityState::pure(&y).unwrap();
        for mode in [SimMode::Exact, SimMode::Circuit] {
            let out = u1_apply(&input, &spec, SpectralFn::Inverse { floor: 0.25 }, mode).unwrap();
            let fid = (y.adjoint() * out.matrix() * &y)[(0, 0)].re;
            assert!(fid > 1.0 - 1e-9, "{fid}");
        }
    }

    proptest! {
        #[test]
        fn swaptest_matches_classical(seed in 0u64..500, n_s in 1usize..8, dim in 1usize..4) {
            let mut rng = seeded(seed);
            let xs = random_real_matrix(dim, n_s, &mut rng);
            let ys: Vec<Label> = (0..n_s).map(|i| if (i as u64 + seed).is_multiple_of(3) { -1 } else { 1 }).collect();
            let model = train_classical(&xs, &ys, 1.0).unwrap();
            prop_assert!(model.alpha.sum().abs() < 1e-10);
            let q = random_real_matrix(dim, 1, &mut rng).column(0).into_owned();
            let a = predict_classical(&model, &q).unwrap();
            let b = predict_swaptest(&model, &q).unwrap();
            prop_assert!((a.decision - b.decision).abs() <= 1e-8);
            prop_assert_eq!(a.label, b.label);

            let flipped: Vec<Label> = ys.iter().map(|y| -y).collect();
            let neg = train_classical(&xs, &flipped, 1.0).unwrap();
            let c = predict_classical(&neg, &q).unwrap();
            prop_assert!((a.decision + c.decision).abs() < 1e-10);
        }

        #[test]
        fn f_is_symmetric(seed in 0u64..200, n_s in 1usize..8) {
            let xs = random_real_matrix(3, n_s, &mut seeded(seed));
            let fm = build_f(&xs, 0.5).unwrap();
            prop_assert_eq!(fm.f.transpose(), fm.f.clone());
        }
    }
}

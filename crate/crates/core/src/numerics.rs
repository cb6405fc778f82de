//! Dense linear algebra shared by the classical solver and the simulators.
//!
//! Everything is generic over `T: ComplexField<RealField = f64>` so the same
//! routines serve real symmetric matrices (the classical kernel algebra) and
//! complex Hermitian ones (density matrices, unitaries).

use nalgebra::{ComplexField, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type ComplexMatrix = DMatrix<C64>;
pub type RealMatrix = DMatrix<f64>;

/// Relative asymmetry tolerated by [`eig_hermitian`].
pub const HERMITIAN_TOL: f64 = 1e-8;
/// Eigenvalues in `[-PSD_CLIP, 0]` count as zero when positivity is required.
pub const PSD_CLIP: f64 = 1e-10;
/// Pseudo-inverse cutoff relative to the largest eigenvalue magnitude.
pub const INV_CUTOFF_REL: f64 = 1e-8;

#[inline]
pub fn c64(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Hermitian eigendecomposition with eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct HermitianEig<T: ComplexField<RealField = f64>> {
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors stored as columns, in eigenvalue order.
    pub eigenvectors: DMatrix<T>,
}

impl<T: ComplexField<RealField = f64>> HermitianEig<T> {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn max_abs(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// `V diag(f(λ)) V†`.
    pub fn apply<F>(&self, f: F) -> Result<DMatrix<T>>
    where
        F: Fn(f64) -> T,
    {
        let n = self.dim();
        let mut scaled = self.eigenvectors.clone();
        for (k, &lambda) in self.eigenvalues.iter().enumerate() {
            let value = f(lambda);
            if !value.is_finite() {
                return Err(Error::Singularity { eigenvalue: lambda });
            }
            for i in 0..n {
                scaled[(i, k)] *= value.clone();
            }
        }
        Ok(scaled * self.eigenvectors.adjoint())
    }

    /// Cutoff below which eigenvalues are treated as zero by inverse functions.
    pub fn inverse_cutoff(&self) -> f64 {
        INV_CUTOFF_REL * self.max_abs()
    }
}

pub fn kron<T: ComplexField>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    a.kronecker(b)
}

pub fn kron_vec<T: ComplexField>(a: &DVector<T>, b: &DVector<T>) -> DVector<T> {
    a.kronecker(b)
}

/// Which factor of a bipartite space to trace out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subsystem {
    First,
    Second,
}

pub fn partial_trace<T: ComplexField>(
    m: &DMatrix<T>,
    dims: (usize, usize),
    which: Subsystem,
) -> Result<DMatrix<T>> {
    let (d1, d2) = dims;
    if m.nrows() != m.ncols() || m.nrows() != d1 * d2 {
        return Err(Error::Dimension(format!(
            "partial trace over {d1}x{d2} needs a square matrix of side {}, got {}x{}",
            d1 * d2,
            m.nrows(),
            m.ncols()
        )));
    }
    let out = match which {
        Subsystem::First => DMatrix::from_fn(d2, d2, |k, l| {
            (0..d1).fold(T::zero(), |acc, i| acc + m[(i * d2 + k, i * d2 + l)].clone())
        }),
        Subsystem::Second => DMatrix::from_fn(d1, d1, |i, j| {
            (0..d2).fold(T::zero(), |acc, k| acc + m[(i * d2 + k, j * d2 + k)].clone())
        }),
    };
    Ok(out)
}

pub fn trace<T: ComplexField>(m: &DMatrix<T>) -> T {
    m.diagonal().iter().fold(T::zero(), |acc, v| acc + v.clone())
}

/// `‖m − m†‖_F / ‖m‖_F`, zero for the zero matrix.
pub fn hermitian_defect<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> f64 {
    let norm = m.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (m - m.adjoint()).norm() / norm
}

pub fn eig_hermitian<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> Result<HermitianEig<T>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "eigendecomposition of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let asymmetry = hermitian_defect(m);
    if asymmetry > HERMITIAN_TOL {
        return Err(Error::Symmetry { asymmetry });
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(HermitianEig {
            eigenvalues: DVector::zeros(0),
            eigenvectors: DMatrix::zeros(0, 0),
        });
    }
    let sym = (m + m.adjoint()).scale(0.5);
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        canonical_phase(&mut col);
        eigenvectors.set_column(dst, &col);
    }
    Ok(HermitianEig {
        eigenvalues,
        eigenvectors,
    })
}

/// Rotates `v` by a global phase so that its largest-magnitude entry (first
/// one on ties) is real and positive.
pub fn canonical_phase<T: ComplexField<RealField = f64>>(v: &mut DVector<T>) {
    let max = v.iter().fold(0.0f64, |acc, x| acc.max(x.clone().modulus()));
    if max == 0.0 {
        return;
    }
    let Some(pivot) = v.iter().position(|x| x.clone().modulus() >= max * (1.0 - 1e-9)) else {
        return;
    };
    let p = v[pivot].clone();
    let phase = p.clone().conjugate().unscale(p.modulus());
    for x in v.iter_mut() {
        *x *= phase.clone();
    }
}

pub fn mat_func_hermitian<T, F>(m: &DMatrix<T>, f: F) -> Result<DMatrix<T>>
where
    T: ComplexField<RealField = f64>,
    F: Fn(f64) -> T,
{
    eig_hermitian(m)?.apply(f)
}

/// Moore–Penrose style inverse with the relative eigenvalue cutoff.
pub fn pinv_hermitian<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let eig = eig_hermitian(m)?;
    let cut = eig.inverse_cutoff();
    eig.apply(|l| {
        if l.abs() < cut {
            T::zero()
        } else {
            T::from_real(1.0 / l)
        }
    })
}

/// `M^{-1/2}` on the positive part of the spectrum, zero below the cutoff.
pub fn inv_sqrt_psd<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let eig = eig_hermitian(m)?;
    let cut = eig.inverse_cutoff();
    eig.apply(|l| {
        if l < cut {
            T::zero()
        } else {
            T::from_real(1.0 / l.sqrt())
        }
    })
}

/// `e^{-iMt}` for Hermitian `M`.
pub fn expm_hermitian(m: &ComplexMatrix, t: f64) -> Result<ComplexMatrix> {
    mat_func_hermitian(m, |l| C64::from_polar(1.0, -l * t))
}

pub fn to_complex(m: &RealMatrix) -> ComplexMatrix {
    m.map(|x| c64(x, 0.0))
}

/// Real part, provided every imaginary part is below `tol` in magnitude.
pub fn to_real(m: &ComplexMatrix, tol: f64) -> Result<RealMatrix> {
    let worst = m.iter().fold(0.0f64, |acc, z| acc.max(z.im.abs()));
    if worst > tol {
        return Err(Error::Numerical(format!(
            "expected a real matrix, imaginary part up to {worst:e}"
        )));
    }
    Ok(m.map(|z| z.re))
}

/// Trace distance `½‖a − b‖₁` between Hermitian matrices.
pub fn trace_distance(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<f64> {
    let eig = eig_hermitian(&(a - b))?;
    Ok(0.5 * eig.eigenvalues.iter().map(|l| l.abs()).sum::<f64>())
}

/// `‖a − b‖_F / ‖b‖_F` (absolute when `b = 0`).
pub fn rel_frobenius<T: ComplexField<RealField = f64>>(a: &DMatrix<T>, b: &DMatrix<T>) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Real-vector sign convention: largest-magnitude entry (first on ties) positive.
pub fn sign_canonical(v: &mut DVector<f64>) {
    canonical_phase(v);
}

/// Spectral norm of a Hermitian matrix.
pub fn hermitian_norm<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> Result<f64> {
    Ok(eig_hermitian(m)?.max_abs())
}

/// Numerical rank: count of singular values above `rel_tol · σ_max`.
pub fn rank(m: &RealMatrix, rel_tol: f64) -> usize {
    let sv = m.clone().singular_values();
    let max = sv.iter().fold(0.0f64, |a, &b| a.max(b));
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

pub fn next_pow2_qubits(n: usize) -> usize {
    let mut q = 0;
    while (1usize << q) < n {
        q += 1;
    }
    q
}

/// Embeds `m` in the top-left corner of a `side × side` zero matrix.
pub fn zero_pad<T: ComplexField>(m: &DMatrix<T>, side: usize) -> DMatrix<T> {
    let mut out = DMatrix::zeros(side, side);
    out.view_mut((0, 0), (m.nrows(), m.ncols())).copy_from(m);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{random_density, random_hermitian, seeded};
    use proptest::prelude::*;
    use rand::Rng;

    fn pauli_x() -> ComplexMatrix {
        ComplexMatrix::from_row_slice(2, 2, &[c64(0., 0.), c64(1., 0.), c64(1., 0.), c64(0., 0.)])
    }

    #[test]
    fn kron_identities() {
        let i2 = ComplexMatrix::identity(2, 2);
        assert_eq!(kron(&i2, &i2), ComplexMatrix::identity(4, 4));

        let xx = kron(&pauli_x(), &pauli_x());
        let mut ket00 = DVector::zeros(4);
        ket00[0] = c64(1., 0.);
        let out = xx * ket00;
        assert_eq!(out[3], c64(1., 0.));
        assert_eq!(out.iter().filter(|z| z.norm() > 0.0).count(), 1);
    }

    #[test]
    fn kron_trace_factorizes() {
        let mut rng = seeded(3);
        let a = ComplexMatrix::from_fn(3, 3, |_, _| c64(rng.random(), rng.random()));
        let b = ComplexMatrix::from_fn(3, 3, |_, _| c64(rng.random(), rng.random()));
        let lhs = trace(&kron(&a, &b));
        // Direct oracle: tr(a⊗b) = Σ_i Σ_k a_ii b_kk.
        let mut rhs = c64(0., 0.);
        for i in 0..3 {
            for k in 0..3 {
                rhs += a[(i, i)] * b[(k, k)];
            }
        }
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn partial_trace_of_product_state() {
        let rho = random_density(2, &mut seeded(1));
        let sigma = random_density(3, &mut seeded(2));
        let joint = kron(&rho, &sigma);
        let reduced = partial_trace(&joint, (2, 3), Subsystem::First).unwrap();
        assert!(rel_frobenius(&reduced, &sigma) < 1e-12);
        let reduced = partial_trace(&joint, (2, 3), Subsystem::Second).unwrap();
        assert!(rel_frobenius(&reduced, &rho) < 1e-12);
    }

    #[test]
    fn partial_trace_of_bell_state() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let bell = DVector::from_vec(vec![c64(s, 0.), c64(0., 0.), c64(0., 0.), c64(s, 0.)]);
        let proj = &bell * bell.adjoint();
        let reduced = partial_trace(&proj, (2, 2), Subsystem::Second).unwrap();
        let half = ComplexMatrix::identity(2, 2).scale(0.5);
        assert!(rel_frobenius(&reduced, &half) < 1e-14);
    }

    #[test]
    fn partial_trace_chain_preserves_trace() {
        let rho = random_density(4, &mut seeded(9));
        let first = partial_trace(&rho, (2, 2), Subsystem::First).unwrap();
        let both = partial_trace(&first, (1, 2), Subsystem::Second).unwrap();
        // Summation oracle: the full trace is the sum of the diagonal.
        let expected: C64 = (0..4).map(|i| rho[(i, i)]).sum();
        assert!((both[(0, 0)] - expected).norm() < 1e-12);
    }

    #[test]
    fn partial_trace_rejects_bad_side() {
        let m = ComplexMatrix::identity(5, 5);
        assert!(matches!(
            partial_trace(&m, (2, 2), Subsystem::First),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn eig_of_diagonal_and_pauli() {
        let d = RealMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let eig = eig_hermitian(&d).unwrap();
        assert_eq!(eig.eigenvalues.as_slice(), &[1.0, 3.0]);
        assert!((eig.eigenvectors[(1, 0)].abs() - 1.0).abs() < 1e-14);
        assert!((eig.eigenvectors[(0, 1)].abs() - 1.0).abs() < 1e-14);

        let eig = eig_hermitian(&pauli_x()).unwrap();
        assert!((eig.eigenvalues[0] + 1.0).abs() < 1e-14);
        assert!((eig.eigenvalues[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eig_reconstructs_random_hermitian() {
        let m = random_hermitian(8, &mut seeded(4));
        let eig = eig_hermitian(&m).unwrap();
        let recon = eig.apply(|l| c64(l, 0.)).unwrap();
        assert!(rel_frobenius(&recon, &m) < 1e-10);
        let gram = eig.eigenvectors.adjoint() * &eig.eigenvectors;
        assert!((gram - ComplexMatrix::identity(8, 8)).norm() < 1e-10);
        assert!(eig.eigenvalues.as_slice().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn eig_rejects_non_hermitian() {
        let m = RealMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(eig_hermitian(&m), Err(Error::Symmetry { .. })));
    }

    #[test]
    fn mat_func_inverse_and_singularity() {
        let d = RealMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        let inv = mat_func_hermitian(&d, |l| 1.0 / l).unwrap();
        assert!((inv[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((inv[(1, 1)] - 0.25).abs() < 1e-14);

        let sing = RealMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0]));
        match mat_func_hermitian(&sing, |l| 1.0 / l) {
            Err(Error::Singularity { eigenvalue }) => assert_eq!(eigenvalue, 0.0),
            other => panic!("expected singularity, got {other:?}"),
        }
        // The cutoff version maps the null space to zero instead.
        let p = pinv_hermitian(&sing).unwrap();
        assert_eq!(p[(0, 0)], 0.0);
        assert!((p[(1, 1)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn exponential_is_unitary() {
        let m = random_hermitian(6, &mut seeded(5));
        let u = expm_hermitian(&m, 0.7).unwrap();
        let err = (u.adjoint() * &u - ComplexMatrix::identity(6, 6)).norm();
        assert!(err < 1e-10);
    }

    #[test]
    fn trace_distance_of_orthogonal_pure_states() {
        let mut a = ComplexMatrix::zeros(2, 2);
        a[(0, 0)] = c64(1., 0.);
        let mut b = ComplexMatrix::zeros(2, 2);
        b[(1, 1)] = c64(1., 0.);
        assert!((trace_distance(&a, &b).unwrap() - 1.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn kron_is_associative_on_integers(
            a in proptest::collection::vec(-5i32..5, 4),
            b in proptest::collection::vec(-5i32..5, 6),
            c in proptest::collection::vec(-5i32..5, 4),
        ) {
            let a = RealMatrix::from_iterator(2, 2, a.into_iter().map(f64::from));
            let b = RealMatrix::from_iterator(3, 2, b.into_iter().map(f64::from));
            let c = RealMatrix::from_iterator(2, 2, c.into_iter().map(f64::from));
            prop_assert_eq!(kron(&kron(&a, &b), &c), kron(&a, &kron(&b, &c)));
        }

        #[test]
        fn partial_trace_keeps_density(seed in 0u64..500) {
            let rho = random_density(6, &mut seeded(seed));
            let red = partial_trace(&rho, (2, 3), Subsystem::First).unwrap();
            prop_assert!((trace(&red).re - 1.0).abs() < 1e-10);
            prop_assert!(hermitian_defect(&red) < 1e-12);
            let eig = eig_hermitian(&red).unwrap();
            prop_assert!(eig.eigenvalues.iter().all(|&l| l >= -PSD_CLIP));
        }

        #[test]
        fn identity_function_roundtrips(seed in 0u64..500) {
            let m = random_hermitian(5, &mut seeded(seed));
            let back = mat_func_hermitian(&m, |l| c64(l, 0.)).unwrap();
            prop_assert!(rel_frobenius(&back, &m) < 1e-10);
        }
    }
}

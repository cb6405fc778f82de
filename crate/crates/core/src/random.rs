//! Seeded generators for random test instances.
//!
//! All randomness in the crate flows through [`seeded`] so that a seed fully
//! determines every derived matrix, state and dataset.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::{c64, ComplexMatrix, RealMatrix, C64};

pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_complex_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, cols, |_, _| c64(gaussian(rng), gaussian(rng)))
}

pub fn random_real_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> RealMatrix {
    RealMatrix::from_fn(rows, cols, |_, _| gaussian(rng))
}

pub fn random_hermitian(n: usize, rng: &mut impl Rng) -> ComplexMatrix {
    let g = random_complex_matrix(n, n, rng);
    (&g + g.adjoint()).scale(0.5)
}

/// Full-rank density matrix `GG†/tr(GG†)`.
pub fn random_density(n: usize, rng: &mut impl Rng) -> ComplexMatrix {
    let g = random_complex_matrix(n, n, rng);
    let p = &g * g.adjoint();
    let tr: f64 = (0..n).map(|i| p[(i, i)].re).sum();
    p.unscale(tr)
}

pub fn random_unit_vector(n: usize, rng: &mut impl Rng) -> DVector<C64> {
    let v = DVector::from_fn(n, |_, _| c64(gaussian(rng), gaussian(rng)));
    let norm = v.norm();
    v.unscale(norm)
}

pub fn random_real_unit_vector(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| gaussian(rng));
    let norm = v.norm();
    v.unscale(norm)
}

/// Real symmetric positive semi-definite matrix of the given rank.
pub fn random_psd(n: usize, rank: usize, rng: &mut impl Rng) -> RealMatrix {
    let g = random_real_matrix(n, rank, rng);
    &g * g.transpose()
}

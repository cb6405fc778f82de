//! Classical transfer component analysis.
//!
//! Builds the kernel, MMD and centering matrices over the combined
//! source-then-target ordering, forms `G = (KLK + μI)⁻¹ KHK` and keeps the
//! eigenvectors of its `d` largest eigenvalues as the transformation `W`.
//! This is the reference every simulated pipeline is checked against.

use nalgebra::{Cholesky, DVector};

use crate::error::{Error, Result};
use crate::numerics::{eig_hermitian, sign_canonical, RealMatrix};

/// Class label, always `-1` or `+1`.
pub type Label = i8;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    /// `D × n_s`, one point per column.
    pub source_points: RealMatrix,
    pub source_labels: Vec<Label>,
    /// `D × n_t`, one point per column.
    pub target_points: RealMatrix,
    /// Ground truth for scoring only; never used for fitting.
    pub target_labels_hidden: Option<Vec<Label>>,
}

impl DomainDataset {
    pub fn new(
        source_points: RealMatrix,
        source_labels: Vec<Label>,
        target_points: RealMatrix,
        target_labels_hidden: Option<Vec<Label>>,
    ) -> Result<Self> {
        let ds = Self {
            source_points,
            source_labels,
            target_points,
            target_labels_hidden,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (n_s, n_t) = (self.n_s(), self.n_t());
        if n_s == 0 || n_t == 0 {
            return Err(Error::Validation(format!(
                "need at least one source and one target point (n_s = {n_s}, n_t = {n_t})"
            )));
        }
        if self.source_points.nrows() != self.target_points.nrows() {
            return Err(Error::Validation(format!(
                "source dimension {} differs from target dimension {}",
                self.source_points.nrows(),
                self.target_points.nrows()
            )));
        }
        if self.source_points.nrows() == 0 {
            return Err(Error::Validation("points have dimension 0".into()));
        }
        if self.source_labels.len() != n_s {
            return Err(Error::Validation(format!(
                "{} source labels for {n_s} source points",
                self.source_labels.len()
            )));
        }
        if let Some(hidden) = &self.target_labels_hidden {
            if hidden.len() != n_t {
                return Err(Error::Validation(format!(
                    "{} hidden target labels for {n_t} target points",
                    hidden.len()
                )));
            }
        }
        let all = self
            .source_labels
            .iter()
            .chain(self.target_labels_hidden.iter().flatten());
        if let Some(bad) = all.into_iter().find(|&&y| y != 1 && y != -1) {
            return Err(Error::Validation(format!("label {bad} is not -1 or +1")));
        }
        if self
            .source_points
            .iter()
            .chain(self.target_points.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::Validation("non-finite coordinate".into()));
        }
        Ok(())
    }

    pub fn n_s(&self) -> usize {
        self.source_points.ncols()
    }

    pub fn n_t(&self) -> usize {
        self.target_points.ncols()
    }

    pub fn n(&self) -> usize {
        self.n_s() + self.n_t()
    }

    pub fn dim(&self) -> usize {
        self.source_points.nrows()
    }

    /// `X = [X_s X_t]`, `D × (n_s + n_t)`.
    pub fn combined(&self) -> RealMatrix {
        let mut x = RealMatrix::zeros(self.dim(), self.n());
        x.columns_mut(0, self.n_s()).copy_from(&self.source_points);
        x.columns_mut(self.n_s(), self.n_t())
            .copy_from(&self.target_points);
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Linear,
    /// `exp(-‖x − y‖² / 2σ²)`; `None` selects the median pairwise distance.
    Rbf { bandwidth: Option<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TcaConfig {
    pub d: usize,
    pub mu: f64,
    /// Trade-off of the kernel-learning objective. Kept for completeness; the
    /// eigenproblem does not depend on it.
    pub lambda_tradeoff: f64,
    pub kernel: Kernel,
}

impl Default for TcaConfig {
    fn default() -> Self {
        Self {
            d: 2,
            mu: 1.0,
            lambda_tradeoff: 0.0,
            kernel: Kernel::Linear,
        }
    }
}

impl TcaConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.d == 0 || self.d > n {
            return Err(Error::Parameter(format!(
                "target dimension d = {} must lie in 1..={n}",
                self.d
            )));
        }
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(Error::Parameter(format!("mu = {} must be positive", self.mu)));
        }
        if !(self.lambda_tradeoff >= 0.0) {
            return Err(Error::Parameter(format!(
                "lambda = {} must be non-negative",
                self.lambda_tradeoff
            )));
        }
        if let Kernel::Rbf {
            bandwidth: Some(bw),
        } = self.kernel
        {
            if !(bw > 0.0) || !bw.is_finite() {
                return Err(Error::Parameter(format!("rbf bandwidth {bw} must be positive")));
            }
        }
        Ok(())
    }
}

/// Median of the pairwise Euclidean distances between columns; `1.0` when
/// every point coincides.
pub fn median_bandwidth(x: &RealMatrix) -> f64 {
    let n = x.ncols();
    let mut dists = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push((x.column(i) - x.column(j)).norm());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

pub fn kernel_matrix(x: &RealMatrix, kernel: Kernel) -> Result<RealMatrix> {
    match kernel {
        Kernel::Linear => Ok(x.transpose() * x),
        Kernel::Rbf { bandwidth } => {
            let bw = match bandwidth {
                Some(bw) if bw > 0.0 && bw.is_finite() => bw,
                Some(bw) => {
                    return Err(Error::Parameter(format!("rbf bandwidth {bw} must be positive")))
                }
                None => median_bandwidth(x),
            };
            let n = x.ncols();
            let denom = 2.0 * bw * bw;
            let mut k = RealMatrix::identity(n, n);
            for i in 0..n {
                for j in i + 1..n {
                    let v = (-(x.column(i) - x.column(j)).norm_squared() / denom).exp();
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            Ok(k)
        }
    }
}

pub fn build_kernel(data: &DomainDataset, cfg: &TcaConfig) -> Result<RealMatrix> {
    kernel_matrix(&data.combined(), cfg.kernel)
}

/// `H = I − 𝟏𝟏ᵀ/n`.
pub fn build_centering(n: usize) -> RealMatrix {
    let inv = 1.0 / n as f64;
    RealMatrix::from_fn(n, n, |i, j| if i == j { 1.0 - inv } else { -inv })
}

/// `v = (𝟏/n_s, −𝟏/n_t)`, so that `L = vvᵀ`.
pub fn mmd_vector(n_s: usize, n_t: usize) -> DVector<f64> {
    DVector::from_fn(n_s + n_t, |i, _| {
        if i < n_s {
            1.0 / n_s as f64
        } else {
            -1.0 / n_t as f64
        }
    })
}

pub fn build_mmd_matrix(n_s: usize, n_t: usize) -> RealMatrix {
    let v = mmd_vector(n_s, n_t);
    &v * v.transpose()
}

/// Coefficient `c` with `L^{1/2} = c·L`, i.e. `√(n_s n_t / (n_s + n_t))`.
pub fn mmd_sqrt_coefficient(n_s: usize, n_t: usize) -> f64 {
    let (s, t) = (n_s as f64, n_t as f64);
    (s * t / (s + t)).sqrt()
}

fn sqrt_nonneg(sq: f64) -> Result<f64> {
    if sq < -1e-10 {
        return Err(Error::Numerical(format!(
            "tr(KL) = {sq:e} is negative; kernel is not PSD"
        )));
    }
    Ok(sq.max(0.0).sqrt())
}

/// MMD in trace form, `√tr(KL)`, for any kernel matrix over the combined
/// ordering.
pub fn mmd_from_kernel(k: &RealMatrix, n_s: usize, n_t: usize) -> Result<f64> {
    let v = mmd_vector(n_s, n_t);
    sqrt_nonneg(v.dot(&(k * &v)))
}

/// Trace-form MMD divided by the RMS spread of the pooled data,
/// `√(tr(KL) / (tr(KH)/n))`. Unchanged by rescaling the features, so data
/// before and after embedding can be compared.
pub fn relative_mmd(k: &RealMatrix, n_s: usize, n_t: usize) -> Result<f64> {
    let n = (n_s + n_t) as f64;
    let scatter = (k.trace() - k.sum() / n) / n;
    if !(scatter > 0.0) {
        return Err(Error::Numerical(format!("pooled data has no spread (tr(KH)/n = {scatter:e})")));
    }
    Ok(mmd_from_kernel(k, n_s, n_t)? / scatter.sqrt())
}

pub fn mmd_distance(data: &DomainDataset, cfg: &TcaConfig) -> Result<f64> {
    let k = build_kernel(data, cfg)?;
    mmd_from_kernel(&k, data.n_s(), data.n_t())
}

/// `‖mean(source) − mean(target)‖` computed directly from the columns; the
/// explicit feature-map form of the linear-kernel MMD.
pub fn mean_difference_norm(source: &RealMatrix, target: &RealMatrix) -> f64 {
    let ms = source.column_mean();
    let mt = target.column_mean();
    (ms - mt).norm()
}

#[derive(Debug, Clone)]
pub struct TcaMatrices {
    pub n_s: usize,
    pub n_t: usize,
    pub mu: f64,
    pub k: RealMatrix,
    pub l: RealMatrix,
    pub h: RealMatrix,
    /// `KLK`
    pub a1: RealMatrix,
    /// `KLK + μI`
    pub a: RealMatrix,
    /// `KHK`
    pub b: RealMatrix,
    /// `A⁻¹B`
    pub g: RealMatrix,
}

impl TcaMatrices {
    pub fn from_kernel(k: RealMatrix, n_s: usize, n_t: usize, mu: f64) -> Result<Self> {
        let n = n_s + n_t;
        if k.nrows() != n || k.ncols() != n {
            return Err(Error::Dimension(format!(
                "kernel is {}x{}, expected {n}x{n}",
                k.nrows(),
                k.ncols()
            )));
        }
        if !(mu > 0.0) {
            return Err(Error::Parameter(format!("mu = {mu} must be positive")));
        }
        let l = build_mmd_matrix(n_s, n_t);
        let h = build_centering(n);
        let a1 = &k * &l * &k;
        let a1 = (&a1 + a1.transpose()).scale(0.5);
        let a = &a1 + RealMatrix::identity(n, n).scale(mu);
        let b = &k * &h * &k;
        let b = (&b + b.transpose()).scale(0.5);

        let eig = eig_hermitian(&a)?;
        let (lo, hi) = (eig.eigenvalues[0], eig.eigenvalues[n - 1]);
        if lo < eig.inverse_cutoff() {
            return Err(Error::Conditioning(format!(
                "KLK + μI has eigenvalue {lo:e} against largest {hi:e}"
            )));
        }
        let chol = Cholesky::new(a.clone()).ok_or_else(|| {
            Error::Conditioning("KLK + μI is not numerically positive definite".into())
        })?;
        let g = chol.solve(&b);
        Ok(Self {
            n_s,
            n_t,
            mu,
            k,
            l,
            h,
            a1,
            a,
            b,
            g,
        })
    }

    pub fn n(&self) -> usize {
        self.n_s + self.n_t
    }

    /// `A^{-1/2}`, well defined since `A ⪰ μI`.
    pub fn a_inv_sqrt(&self) -> Result<RealMatrix> {
        eig_hermitian(&self.a)?.apply(|l| 1.0 / l.sqrt())
    }

    /// The symmetric matrix `A^{-1/2} B A^{-1/2}`, similar to `G`.
    pub fn similar_symmetric(&self) -> Result<RealMatrix> {
        let r = self.a_inv_sqrt()?;
        let s = &r * &self.b * &r;
        Ok((&s + s.transpose()).scale(0.5))
    }
}

pub fn build_g(data: &DomainDataset, cfg: &TcaConfig) -> Result<TcaMatrices> {
    cfg.validate(data.n())?;
    let k = build_kernel(data, cfg)?;
    TcaMatrices::from_kernel(k, data.n_s(), data.n_t(), cfg.mu)
}

#[derive(Debug, Clone)]
pub struct TcaModel {
    /// `(n_s + n_t) × d`, unit-norm sign-canonical columns.
    pub w: RealMatrix,
    /// Matching eigenvalues of `G`, descending.
    pub eigenvalues: Vec<f64>,
    /// Set when eigenvalues `d` and `d + 1` coincide, making the subspace
    /// choice arbitrary.
    pub degenerate_cut: bool,
}

impl TcaModel {
    pub fn d(&self) -> usize {
        self.w.ncols()
    }
}

/// Maps eigenvectors of `A^{-1/2}BA^{-1/2}` to unit-norm eigenvectors of `G`.
pub fn map_to_g_eigenvectors(
    a_inv_sqrt: &RealMatrix,
    vectors: impl IntoIterator<Item = DVector<f64>>,
) -> RealMatrix {
    let cols: Vec<DVector<f64>> = vectors
        .into_iter()
        .map(|v| {
            let mut w = a_inv_sqrt * v;
            let norm = w.norm();
            if norm > 0.0 {
                w.unscale_mut(norm);
            }
            sign_canonical(&mut w);
            w
        })
        .collect();
    RealMatrix::from_columns(&cols)
}

const DEGENERACY_TOL: f64 = 1e-12;

pub fn solve_tca(m: &TcaMatrices, cfg: &TcaConfig) -> Result<TcaModel> {
    let n = m.n();
    cfg.validate(n)?;
    let s = m.similar_symmetric()?;
    let eig = eig_hermitian(&s)?;
    let desc: Vec<usize> = (0..n).rev().collect();
    let degenerate_cut =
        cfg.d < n && (eig.eigenvalues[desc[cfg.d - 1]] - eig.eigenvalues[desc[cfg.d]]).abs() <= DEGENERACY_TOL;
    if degenerate_cut {
        log::warn!(
            "eigenvalues {} and {} of G coincide; the selected subspace is not unique",
            cfg.d,
            cfg.d + 1
        );
    }
    let r = m.a_inv_sqrt()?;
    let w = map_to_g_eigenvectors(
        &r,
        desc[..cfg.d]
            .iter()
            .map(|&k| eig.eigenvectors.column(k).into_owned()),
    );
    Ok(TcaModel {
        w,
        eigenvalues: desc[..cfg.d].iter().map(|&k| eig.eigenvalues[k]).collect(),
        degenerate_cut,
    })
}

/// `X̂ = WᵀK`, split into source and target columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub source: RealMatrix,
    pub target: RealMatrix,
}

impl Embedding {
    pub fn mmd(&self) -> f64 {
        mean_difference_norm(&self.source, &self.target)
    }

    pub fn relative_mmd(&self) -> Result<f64> {
        let (n_s, n_t) = (self.source.ncols(), self.target.ncols());
        let mut x = RealMatrix::zeros(self.source.nrows(), n_s + n_t);
        x.columns_mut(0, n_s).copy_from(&self.source);
        x.columns_mut(n_s, n_t).copy_from(&self.target);
        relative_mmd(&(x.transpose() * x), n_s, n_t)
    }
}

pub fn embed(m: &TcaMatrices, model: &TcaModel) -> Result<Embedding> {
    if model.w.nrows() != m.n() {
        return Err(Error::Dimension(format!(
            "W has {} rows, kernel has side {}",
            model.w.nrows(),
            m.n()
        )));
    }
    let x_hat = model.w.transpose() * &m.k;
    Ok(Embedding {
        source: x_hat.columns(0, m.n_s).into_owned(),
        target: x_hat.columns(m.n_s, m.n_t).into_owned(),
    })
}

/// `tr(WᵀAW)` after rescaling `W` so that `WᵀBW = I`; the constrained TCA
/// objective. Fails if `WᵀBW` is singular.
pub fn constrained_objective(m: &TcaMatrices, w: &RealMatrix) -> Result<f64> {
    let gram = w.transpose() * &m.b * w;
    let eig = eig_hermitian(&gram)?;
    if eig.eigenvalues[0] <= eig.inverse_cutoff().max(1e-14) {
        return Err(Error::Conditioning("WᵀBW is singular".into()));
    }
    let norm = eig.apply(|l| 1.0 / l.sqrt())?;
    let wn = w * norm;
    Ok((wn.transpose() * &m.a * &wn).trace())
}

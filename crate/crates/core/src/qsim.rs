//! Exact density-matrix simulation of the circuit primitives used by the
//! quantum pipelines: phase estimation, eigenvalue-conditioned rotation,
//! post-selection, the composite `U₁(M, f)`, product formulas,
//! density-matrix exponentiation, and the interference tests used to read
//! out overlaps and expectation values.
//!
//! Registers are laid out most-significant first. The `U₁` circuit uses the
//! order `R ⊗ C ⊗ I` (rotation ancilla, clock, index).
//!
//! Post-selection is never sampled: the projected branch is renormalized and
//! its probability multiplied into [`DensityState::success_probability`].

use std::f64::consts::PI;

use nalgebra::DVector;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::{
    c64, eig_hermitian, expm_hermitian, hermitian_defect, kron, partial_trace, trace, ComplexMatrix,
    Subsystem, C64, PSD_CLIP,
};

pub const CLOCK: &str = "C";
pub const INDEX: &str = "I";
pub const ROTATION: &str = "R";

/// Default lower bound on a post-selected branch probability.
pub const EPS_POST: f64 = 1e-12;
const STATE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Register {
    pub name: String,
    pub qubits: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterLayout {
    registers: Vec<Register>,
}

/// Dimensions of the registers before, at and after a located register.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Span {
    before: usize,
    dim: usize,
    after: usize,
}

impl RegisterLayout {
    pub fn new<S: Into<String>>(registers: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let registers: Vec<Register> = registers
            .into_iter()
            .map(|(name, qubits)| Register {
                name: name.into(),
                qubits,
            })
            .collect();
        for (i, r) in registers.iter().enumerate() {
            if registers[..i].iter().any(|o| o.name == r.name) {
                return Err(Error::Parameter(format!("duplicate register `{}`", r.name)));
            }
        }
        Ok(Self { registers })
    }

    /// A single index register of `qubits` qubits.
    pub fn index(qubits: usize) -> Self {
        Self {
            registers: vec![Register {
                name: INDEX.into(),
                qubits,
            }],
        }
    }

    pub fn registers(&self) -> &[Register] {
        &self.registers
    }

    pub fn total_qubits(&self) -> usize {
        self.registers.iter().map(|r| r.qubits).sum()
    }

    pub fn dim(&self) -> usize {
        1 << self.total_qubits()
    }

    pub fn qubits(&self, name: &str) -> Result<usize> {
        Ok(self.registers[self.position(name)?].qubits)
    }

    fn position(&self, name: &str) -> Result<usize> {
        self.registers
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| Error::Parameter(format!("no register named `{name}`")))
    }

    fn span(&self, first: usize, count: usize) -> Span {
        let q = |rs: &[Register]| rs.iter().map(|r| r.qubits).sum::<usize>();
        Span {
            before: 1 << q(&self.registers[..first]),
            dim: 1 << q(&self.registers[first..first + count]),
            after: 1 << q(&self.registers[first + count..]),
        }
    }

    /// Span covering the named registers, which must be adjacent and in order.
    fn contiguous(&self, names: &[&str]) -> Result<Span> {
        let first = self.position(names[0])?;
        for (k, name) in names.iter().enumerate().skip(1) {
            if self.position(name)? != first + k {
                return Err(Error::Parameter(format!(
                    "registers {names:?} must be adjacent and in this order"
                )));
            }
        }
        Ok(self.span(first, names.len()))
    }

    pub fn without(&self, name: &str) -> Result<Self> {
        let pos = self.position(name)?;
        let mut registers = self.registers.clone();
        registers.remove(pos);
        Ok(Self { registers })
    }

    pub fn with_front(&self, name: &str, qubits: usize) -> Result<Self> {
        let mut all = vec![(name.to_string(), qubits)];
        all.extend(self.registers.iter().map(|r| (r.name.clone(), r.qubits)));
        Self::new(all)
    }
}

/// Trace-one positive semi-definite state over a register layout.
#[derive(Debug, Clone)]
pub struct DensityState {
    layout: RegisterLayout,
    matrix: ComplexMatrix,
    success_probability: f64,
}

impl DensityState {
    pub fn new(layout: RegisterLayout, matrix: ComplexMatrix) -> Result<Self> {
        Self::with_success(layout, matrix, 1.0)
    }

    fn with_success(layout: RegisterLayout, matrix: ComplexMatrix, success: f64) -> Result<Self> {
        let state = Self {
            layout,
            matrix,
            success_probability: success,
        };
        state.validate()?;
        Ok(state)
    }

    /// Symmetrizes and renormalizes an operator produced by a simulation step.
    fn from_unnormalized(
        layout: RegisterLayout,
        matrix: ComplexMatrix,
        success: f64,
    ) -> Result<Self> {
        let tr = trace(&matrix).re;
        if !(tr > 0.0) {
            return Err(Error::Normalization(format!("trace {tr:e} is not positive")));
        }
        let m = (&matrix + matrix.adjoint()).scale(0.5 / tr);
        Self::with_success(layout, m, success)
    }

    /// State proportional to a positive operator on a single index register.
    pub fn from_index_operator(m: &ComplexMatrix) -> Result<Self> {
        let side = m.nrows();
        if !side.is_power_of_two() {
            return Err(Error::Dimension(format!(
                "index register side {side} is not a power of two"
            )));
        }
        Self::from_unnormalized(RegisterLayout::index(side.trailing_zeros() as usize), m.clone(), 1.0)
    }

    pub fn pure(v: &DVector<C64>) -> Result<Self> {
        check_unit(v)?;
        Self::from_index_operator(&(v * v.adjoint()))
    }

    pub fn layout(&self) -> &RegisterLayout {
        &self.layout
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.matrix
    }

    pub fn success_probability(&self) -> f64 {
        self.success_probability
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.layout.dim();
        if self.matrix.nrows() != dim || self.matrix.ncols() != dim {
            return Err(Error::Dimension(format!(
                "layout needs a {dim}x{dim} matrix, got {}x{}",
                self.matrix.nrows(),
                self.matrix.ncols()
            )));
        }
        if self.matrix.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Numerical("non-finite density matrix entry".into()));
        }
        let defect = hermitian_defect(&self.matrix);
        if defect > STATE_TOL {
            return Err(Error::Symmetry { asymmetry: defect });
        }
        let tr = trace(&self.matrix);
        if (tr.re - 1.0).abs() > STATE_TOL || tr.im.abs() > STATE_TOL {
            return Err(Error::Normalization(format!("trace {tr}")));
        }
        let lo = eig_hermitian(&self.matrix)?.eigenvalues[0];
        if lo < -PSD_CLIP {
            return Err(Error::Numerical(format!("negative eigenvalue {lo:e}")));
        }
        if !(self.success_probability > 0.0 && self.success_probability <= 1.0 + STATE_TOL) {
            return Err(Error::Numerical(format!(
                "success probability {} outside (0, 1]",
                self.success_probability
            )));
        }
        Ok(())
    }

    /// `|0…0⟩⟨0…0|_name ⊗ ρ`.
    pub fn prepend_zero_register(&self, name: &str, qubits: usize) -> Result<Self> {
        let layout = self.layout.with_front(name, qubits)?;
        let mut zero = ComplexMatrix::zeros(1 << qubits, 1 << qubits);
        zero[(0, 0)] = c64(1.0, 0.0);
        Self::with_success(layout, kron(&zero, &self.matrix), self.success_probability)
    }

    /// Reduced state of one register.
    pub fn reduced(&self, name: &str) -> Result<ComplexMatrix> {
        let pos = self.layout.position(name)?;
        let span = self.layout.span(pos, 1);
        let outer = partial_trace(&self.matrix, (span.before, span.dim * span.after), Subsystem::First)?;
        partial_trace(&outer, (span.dim, span.after), Subsystem::Second)
    }

    pub fn trace_out(&self, name: &str) -> Result<Self> {
        let pos = self.layout.position(name)?;
        let span = self.layout.span(pos, 1);
        let m = trace_middle(&self.matrix, span);
        Self::from_unnormalized(self.layout.without(name)?, m, self.success_probability)
    }

    /// Computational-basis populations of one register.
    pub fn populations(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.reduced(name)?.diagonal().iter().map(|z| z.re).collect())
    }

    fn apply_on(&self, span: Span, u: &ComplexMatrix) -> Result<Self> {
        let full = kron(
            &ComplexMatrix::identity(span.before, span.before),
            &kron(u, &ComplexMatrix::identity(span.after, span.after)),
        );
        let m = &full * &self.matrix * full.adjoint();
        Self::from_unnormalized(self.layout.clone(), m, self.success_probability)
    }
}

/// `tr_middle` over the `span.dim` factor of `before ⊗ dim ⊗ after`.
fn trace_middle(m: &ComplexMatrix, span: Span) -> ComplexMatrix {
    let Span { before, dim, after } = span;
    let side = before * after;
    ComplexMatrix::from_fn(side, side, |r, c| {
        let (b1, a1) = (r / after, r % after);
        let (b2, a2) = (c / after, c % after);
        (0..dim).fold(c64(0.0, 0.0), |acc, k| {
            acc + m[((b1 * dim + k) * after + a1, (b2 * dim + k) * after + a2)]
        })
    })
}

pub(crate) fn check_unit(v: &DVector<C64>) -> Result<()> {
    let norm = v.norm();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::Normalization(format!("vector norm {norm}")));
    }
    Ok(())
}

/// How clock values are decoded into eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spectrum {
    /// Clock value `j` encodes `2πj / (t₀T)`.
    NonNegative,
    /// Values `j ≥ T/2` encode the negative eigenvalue `2π(j − T) / (t₀T)`.
    Signed,
}

/// Hamiltonian evolution as used by phase estimation and product formulas.
#[derive(Debug, Clone)]
pub struct EvolutionSpec {
    /// Hermitian terms summing to the Hamiltonian. With more than one term the
    /// evolution is built from a first-order product formula.
    pub parts: Vec<ComplexMatrix>,
    /// Total time for [`trotter_evolve`].
    pub time: f64,
    /// Product-formula slices, per unit of `time` for [`trotter_evolve`] and per
    /// clock increment for phase estimation.
    pub trotter_slices: usize,
    pub clock_qubits: usize,
    /// `t₀`: clock value `τ` drives `e^{iMτt₀}`.
    pub scale: f64,
    pub spectrum: Spectrum,
}

impl EvolutionSpec {
    pub fn new(hamiltonian: ComplexMatrix) -> Self {
        Self::from_parts(vec![hamiltonian])
    }

    pub fn from_parts(parts: Vec<ComplexMatrix>) -> Self {
        Self {
            parts,
            time: 1.0,
            trotter_slices: 1,
            clock_qubits: 8,
            scale: 1.0,
            spectrum: Spectrum::NonNegative,
        }
    }

    /// Sets the clock size and picks `t₀` so that eigenvalues up to `bound` in
    /// magnitude land on the clock grid without wrapping.
    pub fn with_clock(mut self, clock_qubits: usize, bound: f64, spectrum: Spectrum) -> Self {
        self.clock_qubits = clock_qubits;
        self.spectrum = spectrum;
        let window = match spectrum {
            Spectrum::NonNegative => 2.0 * PI * (1.0 - 0.5f64.powi(clock_qubits as i32)),
            Spectrum::Signed => PI * (1.0 - 0.5f64.powi(clock_qubits as i32 - 1)),
        };
        self.scale = window / bound;
        self
    }

    pub fn with_time(mut self, time: f64, slices: usize) -> Self {
        self.time = time;
        self.trotter_slices = slices;
        self
    }

    pub fn hamiltonian(&self) -> ComplexMatrix {
        let mut parts = self.parts.iter();
        let first = parts.next().cloned().unwrap_or_else(|| ComplexMatrix::zeros(0, 0));
        parts.fold(first, |acc, p| acc + p)
    }

    pub fn side(&self) -> usize {
        self.parts.first().map_or(0, |p| p.nrows())
    }

    pub fn clock_dim(&self) -> usize {
        1 << self.clock_qubits
    }

    /// Largest eigenvalue magnitude representable without wrapping.
    pub fn bound(&self) -> f64 {
        let t = self.clock_qubits as i32;
        match self.spectrum {
            Spectrum::NonNegative => 2.0 * PI * (1.0 - 0.5f64.powi(t)) / self.scale,
            Spectrum::Signed => PI * (1.0 - 0.5f64.powi(t - 1)) / self.scale,
        }
    }

    /// Largest magnitude any clock value decodes to. Equals [`Self::bound`]
    /// for non-negative spectra; for signed ones the most negative clock
    /// value lies one grid step beyond it.
    pub fn decoded_range(&self) -> f64 {
        match self.spectrum {
            Spectrum::NonNegative => self.bound(),
            Spectrum::Signed => PI / self.scale,
        }
    }

    /// Eigenvalue encoded by clock value `j`.
    pub fn decode(&self, j: usize) -> f64 {
        let big_t = self.clock_dim();
        let j = match self.spectrum {
            Spectrum::Signed if j >= big_t / 2 => j as f64 - big_t as f64,
            _ => j as f64,
        };
        2.0 * PI * j / (self.scale * big_t as f64)
    }

    /// Resolution of the clock grid, `2^{-t}·(2π/t₀)`.
    pub fn resolution(&self) -> f64 {
        2.0 * PI / (self.scale * self.clock_dim() as f64)
    }

    fn check_range(&self) -> Result<()> {
        let eig = eig_hermitian(&self.hamiltonian())?;
        let (lo, hi) = (eig.eigenvalues[0], eig.eigenvalues[eig.dim() - 1]);
        let frac = |l: f64| l * self.scale / (2.0 * PI);
        let ok = match self.spectrum {
            Spectrum::NonNegative => lo >= -1e-12 && frac(hi) < 1.0,
            Spectrum::Signed => frac(lo) >= -0.5 && frac(hi) < 0.5,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Range(format!(
                "spectrum [{lo:.4e}, {hi:.4e}] wraps at t0 = {:.4e}",
                self.scale
            )))
        }
    }

    /// `e^{-iH dt}`, exact for one term, product formula otherwise.
    fn step(&self, dt: f64, slices: usize) -> Result<ComplexMatrix> {
        if self.parts.len() == 1 {
            return expm_hermitian(&self.parts[0], dt);
        }
        product_formula(&self.parts, dt, slices)
    }

    /// `e^{iMt₀}`, the unitary controlled by one clock increment.
    fn clock_unitary(&self) -> Result<ComplexMatrix> {
        self.step(-self.scale, self.trotter_slices)
    }
}

fn product_formula(parts: &[ComplexMatrix], time: f64, slices: usize) -> Result<ComplexMatrix> {
    if slices == 0 {
        return Err(Error::Parameter("product formula needs at least one slice".into()));
    }
    let n = parts[0].nrows();
    let dt = time / slices as f64;
    let mut slice = ComplexMatrix::identity(n, n);
    for p in parts {
        slice = expm_hermitian(p, dt)? * slice;
    }
    Ok(matrix_power(&slice, slices))
}

fn matrix_power(m: &ComplexMatrix, mut e: usize) -> ComplexMatrix {
    let n = m.nrows();
    let mut result = ComplexMatrix::identity(n, n);
    let mut base = m.clone();
    while e > 0 {
        if e & 1 == 1 {
            result = &result * &base;
        }
        base = &base * &base;
        e >>= 1;
    }
    result
}

/// `(e^{-iA₁t/k} e^{-iA₂t/k} ⋯)^k` over the parts of `spec`, with
/// `k = spec.trotter_slices` and `t = spec.time`.
pub fn trotter_evolve(spec: &EvolutionSpec) -> Result<ComplexMatrix> {
    if spec.parts.is_empty() {
        return Err(Error::Parameter("no Hamiltonian terms".into()));
    }
    // The right-most factor acts first.
    let parts: Vec<ComplexMatrix> = spec.parts.iter().rev().cloned().collect();
    product_formula(&parts, spec.time, spec.trotter_slices)
}

fn qft_matrix(dim: usize, inverse: bool) -> ComplexMatrix {
    let sign = if inverse { -1.0 } else { 1.0 };
    let norm = 1.0 / (dim as f64).sqrt();
    ComplexMatrix::from_fn(dim, dim, |j, k| {
        C64::from_polar(norm, sign * 2.0 * PI * ((j * k) % dim) as f64 / dim as f64)
    })
}

fn hadamard_transform(dim: usize) -> ComplexMatrix {
    let norm = 1.0 / (dim as f64).sqrt();
    ComplexMatrix::from_fn(dim, dim, |j, k| {
        let sign = if (j & k).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
        c64(sign * norm, 0.0)
    })
}

/// Dense `U_PE = (QFT† ⊗ I)(Σ_τ |τ⟩⟨τ| ⊗ e^{iMτt₀})(H^{⊗t} ⊗ I)` on `C ⊗ I`.
fn phase_estimation_unitary(spec: &EvolutionSpec) -> Result<ComplexMatrix> {
    let big_t = spec.clock_dim();
    let n = spec.side();
    let u = spec.clock_unitary()?;
    let mut controlled = ComplexMatrix::zeros(big_t * n, big_t * n);
    let mut power = ComplexMatrix::identity(n, n);
    for tau in 0..big_t {
        controlled
            .view_mut((tau * n, tau * n), (n, n))
            .copy_from(&power);
        power = &u * power;
    }
    let eye = ComplexMatrix::identity(n, n);
    Ok(kron(&qft_matrix(big_t, true), &eye) * controlled * kron(&hadamard_transform(big_t), &eye))
}

fn check_clock_layout(state: &DensityState, spec: &EvolutionSpec) -> Result<Span> {
    let layout = state.layout();
    if layout.qubits(CLOCK)? != spec.clock_qubits {
        return Err(Error::Dimension(format!(
            "clock register has {} qubits, evolution expects {}",
            layout.qubits(CLOCK)?,
            spec.clock_qubits
        )));
    }
    if 1 << layout.qubits(INDEX)? != spec.side() {
        return Err(Error::Dimension(format!(
            "index register of dimension {} for a {}-dimensional Hamiltonian",
            1usize << layout.qubits(INDEX)?,
            spec.side()
        )));
    }
    layout.contiguous(&[CLOCK, INDEX])
}

/// Phase estimation of `spec`'s Hamiltonian on the `C ⊗ I` registers. The
/// clock must start in `|0…0⟩`.
pub fn phase_estimation(state: &DensityState, spec: &EvolutionSpec) -> Result<DensityState> {
    let span = check_clock_layout(state, spec)?;
    spec.check_range()?;
    let p0 = state.populations(CLOCK)?[0];
    if (p0 - 1.0).abs() > 1e-10 {
        return Err(Error::Parameter(format!(
            "clock register must start in |0>, population {p0}"
        )));
    }
    state.apply_on(span, &phase_estimation_unitary(spec)?)
}

/// `U_PE†`, used to uncompute the clock.
pub fn inverse_phase_estimation(state: &DensityState, spec: &EvolutionSpec) -> Result<DensityState> {
    let span = check_clock_layout(state, spec)?;
    state.apply_on(span, &phase_estimation_unitary(spec)?.adjoint())
}

/// `|0⟩ → √(1 − a²)|0⟩ + a|1⟩` as a real rotation.
fn ry_for_amplitude(a: f64) -> ComplexMatrix {
    let c = (1.0 - a * a).max(0.0).sqrt();
    ComplexMatrix::from_row_slice(2, 2, &[c64(c, 0.), c64(-a, 0.), c64(a, 0.), c64(c, 0.)])
}

/// Rotates the ancilla `R` by `γ·f(λ_j)` conditioned on each clock value `j`.
/// `R` must directly precede `C` and start in `|0⟩`.
pub fn conditional_rotation<F>(
    state: &DensityState,
    spec: &EvolutionSpec,
    f: F,
    gamma: f64,
) -> Result<DensityState>
where
    F: Fn(f64) -> f64,
{
    let layout = state.layout();
    if layout.qubits(ROTATION)? != 1 {
        return Err(Error::Dimension("rotation ancilla must be one qubit".into()));
    }
    let span = layout.contiguous(&[ROTATION, CLOCK])?;
    let p0 = state.populations(ROTATION)?[0];
    if (p0 - 1.0).abs() > 1e-10 {
        return Err(Error::Parameter(format!(
            "rotation ancilla must start in |0>, population {p0}"
        )));
    }
    let clock_pop = state.populations(CLOCK)?;
    let big_t = clock_pop.len();
    let mut u = ComplexMatrix::zeros(2 * big_t, 2 * big_t);
    for (j, &pop) in clock_pop.iter().enumerate() {
        let a = gamma * f(spec.decode(j));
        let present = pop > 1e-14;
        if present && !(a.abs() <= 1.0 + 1e-12) {
            return Err(Error::RotationRange { amplitude: a });
        }
        let a = if a.is_finite() { a.clamp(-1.0, 1.0) } else { 0.0 };
        let r = ry_for_amplitude(a);
        for (x, y) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            u[(x * big_t + j, y * big_t + j)] = r[(x, y)];
        }
    }
    state.apply_on(span, &u)
}

/// Projects a one-qubit register onto `|1⟩`, renormalizes, and removes it.
pub fn postselect_one(state: &DensityState, register: &str) -> Result<DensityState> {
    postselect_one_with(state, register, EPS_POST)
}

pub fn postselect_one_with(state: &DensityState, register: &str, eps: f64) -> Result<DensityState> {
    let layout = state.layout();
    if layout.qubits(register)? != 1 {
        return Err(Error::Dimension(format!("register `{register}` is not a single qubit")));
    }
    let span = layout.span(layout.position(register)?, 1);
    let side = span.before * span.after;
    let m = state.matrix();
    let branch = ComplexMatrix::from_fn(side, side, |r, c| {
        let (b1, a1) = (r / span.after, r % span.after);
        let (b2, a2) = (c / span.after, c % span.after);
        m[((b1 * 2 + 1) * span.after + a1, (b2 * 2 + 1) * span.after + a2)]
    });
    let probability = trace(&branch).re;
    if !(probability >= eps) {
        return Err(Error::PostSelection {
            register: register.to_string(),
            probability,
        });
    }
    DensityState::from_unnormalized(
        layout.without(register)?,
        branch,
        state.success_probability * probability,
    )
}

/// Eigenvalue function applied by `U₁`.
///
/// Inverse functions carry `floor`, a known lower bound on the magnitude of
/// the eigenvalues that matter. Eigenvalues below `floor / 2` are filtered to
/// zero and `γ` is chosen so that `|γ f(λ)| ≤ 1` on everything that survives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectralFn {
    Identity,
    Inverse { floor: f64 },
    InverseSqrt { floor: f64 },
}

impl SpectralFn {
    fn threshold(&self) -> f64 {
        match *self {
            SpectralFn::Identity => 0.0,
            SpectralFn::Inverse { floor } | SpectralFn::InverseSqrt { floor } => 0.5 * floor,
        }
    }

    pub fn eval(&self, lambda: f64) -> f64 {
        match *self {
            SpectralFn::Identity => lambda,
            SpectralFn::Inverse { .. } => {
                if lambda.abs() < self.threshold() {
                    0.0
                } else {
                    1.0 / lambda
                }
            }
            SpectralFn::InverseSqrt { .. } => {
                if lambda < self.threshold() {
                    0.0
                } else {
                    1.0 / lambda.sqrt()
                }
            }
        }
    }

    /// Rotation constant keeping `|γ f(λ)| ≤ 1` for `|λ| ≤ bound`.
    pub fn gamma(&self, bound: f64) -> f64 {
        match *self {
            SpectralFn::Identity => 1.0 / bound,
            SpectralFn::Inverse { .. } => self.threshold(),
            SpectralFn::InverseSqrt { .. } => self.threshold().sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMode {
    /// Phase estimation, rotation, uncomputation and post-selection on an
    /// explicit clock register.
    Circuit,
    /// The ideal limit `γ² f(M) ρ f(M)†`.
    Exact,
}

/// `U₁(M, f)` followed by post-selection of the ancilla on `|1⟩`: maps an
/// index-register state to one proportional to `f(M) ρ f(M)†`.
pub fn u1_apply(
    state: &DensityState,
    spec: &EvolutionSpec,
    f: SpectralFn,
    mode: SimMode,
) -> Result<DensityState> {
    if state.layout().registers().len() != 1 || state.dim() != spec.side() {
        return Err(Error::Dimension(format!(
            "u1_apply acts on a bare index register matching the {}-dimensional Hamiltonian",
            spec.side()
        )));
    }
    let gamma = f.gamma(spec.decoded_range());
    let branch = match mode {
        SimMode::Exact => {
            let fm = eig_hermitian(&spec.hamiltonian())?.apply(|l| c64(f.eval(l), 0.0))?;
            (&fm * state.matrix() * fm.adjoint()).scale(gamma * gamma)
        }
        SimMode::Circuit => {
            spec.check_range()?;
            u1_circuit_branch(state.matrix(), spec, |l| gamma * f.eval(l))?
        }
    };
    let probability = trace(&branch).re;
    if !(probability >= EPS_POST) {
        return Err(Error::PostSelection {
            register: ROTATION.into(),
            probability,
        });
    }
    DensityState::from_unnormalized(
        state.layout().clone(),
        branch,
        state.success_probability * probability,
    )
}

/// Unnormalized index-register operator left in the `R = 1` branch after
/// `U_PE → U_CR → U_PE†` with the clock traced out.
///
/// The input is split into its spectral ensemble `Σ p_m |v_m⟩⟨v_m|`; each pure
/// component is pushed through the clock circuit as a `T × N` amplitude array
/// with the QFT done by FFT. This is the same linear map as the dense
/// register-level operations, at `O(T N²)` cost per component.
fn u1_circuit_branch<F>(rho: &ComplexMatrix, spec: &EvolutionSpec, amplitude: F) -> Result<ComplexMatrix>
where
    F: Fn(f64) -> f64,
{
    let n = spec.side();
    let big_t = spec.clock_dim();
    let rotations: Vec<f64> = (0..big_t).map(|j| amplitude(spec.decode(j))).collect();
    if let Some(&bad) = rotations.iter().find(|a| !(a.abs() <= 1.0 + 1e-12)) {
        return Err(Error::RotationRange { amplitude: bad });
    }
    let powers = unitary_powers(&spec.clock_unitary()?, big_t);
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(big_t);
    let backward = planner.plan_fft_inverse(big_t);
    let norm = 1.0 / (big_t as f64).sqrt();

    let eig = eig_hermitian(rho)?;
    let mut out = ComplexMatrix::zeros(n, n);
    let mut column = vec![c64(0.0, 0.0); big_t];
    for (m, &p) in eig.eigenvalues.iter().enumerate() {
        if p <= PSD_CLIP {
            continue;
        }
        let v = eig.eigenvectors.column(m).into_owned();
        // amps[τ·n + i]: clock τ, index i.
        let mut amps = vec![c64(0.0, 0.0); big_t * n];
        for (tau, power) in powers.iter().enumerate() {
            let w = power * &v;
            for i in 0..n {
                amps[tau * n + i] = w[i] * norm;
            }
        }
        let fft_over_clock = |amps: &mut [C64], column: &mut [C64], plan: &dyn rustfft::Fft<f64>| {
            for i in 0..n {
                for tau in 0..big_t {
                    column[tau] = amps[tau * n + i];
                }
                plan.process(column);
                for j in 0..big_t {
                    amps[j * n + i] = column[j] * norm;
                }
            }
        };
        // QFT† (forward DFT sign convention).
        fft_over_clock(&mut amps, &mut column, forward.as_ref());
        for j in 0..big_t {
            for i in 0..n {
                amps[j * n + i] *= rotations[j];
            }
        }
        // Uncompute: QFT, controlled inverse powers, Hadamards.
        fft_over_clock(&mut amps, &mut column, backward.as_ref());
        for (tau, power) in powers.iter().enumerate() {
            let w = DVector::from_fn(n, |i, _| amps[tau * n + i]);
            let back = power.adjoint() * w;
            for i in 0..n {
                amps[tau * n + i] = back[i];
            }
        }
        walsh_hadamard_rows(&mut amps, big_t, n);
        for j in 0..big_t {
            let row = DVector::from_fn(n, |i, _| amps[j * n + i]);
            out += (&row * row.adjoint()).scale(p);
        }
    }
    Ok(out)
}

fn unitary_powers(u: &ComplexMatrix, count: usize) -> Vec<ComplexMatrix> {
    let n = u.nrows();
    let mut powers = Vec::with_capacity(count);
    let mut current = ComplexMatrix::identity(n, n);
    for _ in 0..count {
        let next = u * &current;
        powers.push(current);
        current = next;
    }
    powers
}

/// Normalized Walsh–Hadamard transform over the clock index of a `T × n`
/// row-major amplitude array.
fn walsh_hadamard_rows(amps: &mut [C64], big_t: usize, n: usize) {
    let mut h = 1;
    while h < big_t {
        for start in (0..big_t).step_by(2 * h) {
            for j in start..start + h {
                for i in 0..n {
                    let x = amps[j * n + i];
                    let y = amps[(j + h) * n + i];
                    amps[j * n + i] = x + y;
                    amps[(j + h) * n + i] = x - y;
                }
            }
        }
        h *= 2;
    }
    let norm = 1.0 / (big_t as f64).sqrt();
    for a in amps.iter_mut() {
        *a *= norm;
    }
}

/// Swap operator on `ℂⁿ ⊗ ℂⁿ`.
pub fn swap_operator(n: usize) -> ComplexMatrix {
    let mut s = ComplexMatrix::zeros(n * n, n * n);
    for i in 0..n {
        for j in 0..n {
            s[(i * n + j, j * n + i)] = c64(1.0, 0.0);
        }
    }
    s
}

/// One density-matrix exponentiation step:
/// `tr₁(e^{-iSΔt}(ρ ⊗ σ)e^{iSΔt})`.
pub fn dme_step(rho: &DensityState, sigma: &DensityState, dt: f64) -> Result<DensityState> {
    let n = rho.dim();
    if sigma.dim() != n {
        return Err(Error::Dimension(format!(
            "DME needs equal dimensions, got {n} and {}",
            sigma.dim()
        )));
    }
    let s = swap_operator(n);
    // S² = I, so e^{-iSΔt} = cos Δt · I − i sin Δt · S.
    let u = ComplexMatrix::identity(n * n, n * n).scale(dt.cos()) - s * c64(0.0, dt.sin());
    let joint = kron(rho.matrix(), sigma.matrix());
    let evolved = &u * joint * u.adjoint();
    let reduced = partial_trace(&evolved, (n, n), Subsystem::First)?;
    DensityState::from_unnormalized(sigma.layout().clone(), reduced, sigma.success_probability)
}

/// `slices` sequential DME steps of `Δt = time / slices`, approximating
/// `e^{-iρt} σ e^{iρt}`.
pub fn dme_evolve(
    rho: &DensityState,
    sigma: &DensityState,
    time: f64,
    slices: usize,
) -> Result<DensityState> {
    if slices == 0 {
        return Err(Error::Parameter("DME needs at least one slice".into()));
    }
    let dt = time / slices as f64;
    (0..slices).try_fold(sigma.clone(), |s, _| dme_step(rho, &s, dt))
}

/// Swap-test probability of reading the ancilla as `0`: `(1 + |⟨a|b⟩|²)/2`.
pub fn swap_test(a: &DVector<C64>, b: &DVector<C64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "swap test on dimensions {} and {}",
            a.len(),
            b.len()
        )));
    }
    check_unit(a)?;
    check_unit(b)?;
    let n = a.len();
    // After H, controlled-SWAP and H the ancilla-0 branch is (|ab⟩ + |ba⟩)/2.
    let ab = a.kronecker(b);
    let ba = DVector::from_fn(n * n, |k, _| ab[(k % n) * n + k / n]);
    Ok((ab + ba).norm_squared() / 4.0)
}

/// Hadamard test with a state-preparation control: ancilla probabilities in
/// the X and Y bases give `⟨a|b⟩` including its phase.
pub fn interference_overlap(a: &DVector<C64>, b: &DVector<C64>) -> Result<C64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "interference test on dimensions {} and {}",
            a.len(),
            b.len()
        )));
    }
    check_unit(a)?;
    check_unit(b)?;
    Ok(hadamard_test(a, b))
}

/// Ancilla-0 probabilities of `(|0⟩|a⟩ + |1⟩|b⟩)/√2` measured in X and Y.
fn hadamard_test(a: &DVector<C64>, b: &DVector<C64>) -> C64 {
    let p_x = (a + b).norm_squared() / 4.0;
    let p_y = (a - b * c64(0.0, 1.0)).norm_squared() / 4.0;
    c64(2.0 * p_x - 1.0, 2.0 * p_y - 1.0)
}

/// Expectation values `⟨ψ|M|ψ⟩` read out from the phase of a one-ancilla
/// controlled-`e^{-iMδ}` interference circuit.
///
/// The phase estimator `−arg⟨e^{-iMδ}⟩/δ` has an even-order bias in `δ`; two
/// rounds of Richardson extrapolation over `δ, δ/2, δ/4` remove the `δ²` and
/// `δ⁴` terms.
#[derive(Debug, Clone)]
pub struct OneStepEstimator {
    delta: f64,
    unitaries: [ComplexMatrix; 3],
    dim: usize,
}

/// Default `‖M‖δ`.
pub const ONE_STEP_WINDOW: f64 = 0.1;

impl OneStepEstimator {
    pub fn new(m: &ComplexMatrix) -> Result<Self> {
        let norm = crate::numerics::hermitian_norm(m)?;
        let delta = if norm > 0.0 { ONE_STEP_WINDOW / norm } else { 1.0 };
        Self::with_delta(m, delta)
    }

    pub fn with_delta(m: &ComplexMatrix, delta: f64) -> Result<Self> {
        let eig = eig_hermitian(m)?;
        if eig.max_abs() * delta > 1.0 || !(delta > 0.0) {
            return Err(Error::Range(format!(
                "‖M‖δ = {:.3e} outside the one-step window (0, 1]",
                eig.max_abs() * delta
            )));
        }
        let u = |d: f64| eig.apply(|l| C64::from_polar(1.0, -l * d));
        Ok(Self {
            delta,
            unitaries: [u(delta)?, u(delta / 2.0)?, u(delta / 4.0)?],
            dim: m.nrows(),
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn estimate(&self, psi: &DVector<C64>) -> Result<f64> {
        if psi.len() != self.dim {
            return Err(Error::Dimension(format!(
                "state of dimension {} for a {}-dimensional operator",
                psi.len(),
                self.dim
            )));
        }
        check_unit(psi)?;
        let mut est = [0.0; 3];
        for (k, (u, e)) in self.unitaries.iter().zip(est.iter_mut()).enumerate() {
            let d = self.delta / f64::from(1u32 << k);
            let z = hadamard_test(psi, &(u * psi));
            *e = -z.arg() / d;
        }
        let r1 = (4.0 * est[1] - est[0]) / 3.0;
        let r2 = (4.0 * est[2] - est[1]) / 3.0;
        Ok((16.0 * r2 - r1) / 15.0)
    }
}

pub fn expectation_1pe(psi: &DVector<C64>, m: &ComplexMatrix) -> Result<f64> {
    OneStepEstimator::new(m)?.estimate(psi)
}

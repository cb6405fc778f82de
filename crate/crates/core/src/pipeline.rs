//! Synthetic data, file formats, configuration and experiment orchestration
//! for the classical, linear-quantum and variational pipelines.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DVector, Rotation2, Vector2};
use rayon::prelude::*;

use crate::error::{Error, Result, StageExt};
use crate::qlinear::{prepare_operators, solve_linear, LinearConfig};
use crate::qsim::SimMode;
use crate::qsvm::{
    accuracy, predict_classical, predict_swaptest, train_classical, train_quantum, Prediction, SvmModel,
    DEFAULT_XI_INV,
};
use crate::random::{gaussian, seeded};
use crate::tca::{
    build_g, build_kernel, embed, mmd_from_kernel, relative_mmd, solve_tca, DomainDataset, Embedding, Kernel, Label, TcaConfig, TcaModel,
};
use crate::vqd::{build_g_tilde, extract_singular_pairs, vqd_solve, VqdConfig};
use crate::numerics::RealMatrix;

/// Two Gaussian classes separated along the first axis; the target domain
/// draws from the same mixture and then rotates (in the plane of the first
/// two axes) and translates every point. The default shift moves the target
/// along the second axis, across the class boundary rather than along the
/// class axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    /// Distance between the two class means.
    pub separation: f64,
    /// Per-coordinate standard deviation of each class.
    pub spread: f64,
    /// Radians.
    pub rotation: f64,
    /// Padded with zeros (or truncated) to the data dimension.
    pub translation: Vec<f64>,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            separation: 3.0,
            spread: 1.0,
            rotation: 0.3,
            translation: vec![0.0, 2.0],
        }
    }
}

impl ShiftSpec {
    pub fn unshifted() -> Self {
        Self {
            rotation: 0.0,
            translation: Vec::new(),
            ..Self::default()
        }
    }
}

fn sample_class_points(n: usize, dim: usize, spec: &ShiftSpec, rng: &mut impl rand::Rng) -> (RealMatrix, Vec<Label>) {
    let labels: Vec<Label> = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
    let mut x = RealMatrix::zeros(dim, n);
    for (j, &y) in labels.iter().enumerate() {
        for a in 0..dim {
            x[(a, j)] = spec.spread * gaussian(rng);
        }
        x[(0, j)] += f64::from(y) * spec.separation / 2.0;
    }
    (x, labels)
}

pub fn generate_domains(spec: &ShiftSpec, n_s: usize, n_t: usize, dim: usize, seed: u64) -> Result<DomainDataset> {
    if n_s < 2 || n_t < 2 {
        return Err(Error::Parameter(format!(
            "two-class data needs n_s, n_t ≥ 2 (got {n_s}, {n_t})"
        )));
    }
    if dim == 0 {
        return Err(Error::Parameter("dimension must be positive".into()));
    }
    if !(spec.spread > 0.0) || !spec.spread.is_finite() {
        return Err(Error::Parameter(format!("spread {} must be positive", spec.spread)));
    }
    let mut rng = seeded(seed);
    let (xs, ys) = sample_class_points(n_s, dim, spec, &mut rng);
    let (mut xt, yt) = sample_class_points(n_t, dim, spec, &mut rng);
    if dim >= 2 {
        let rot = Rotation2::new(spec.rotation);
        for mut col in xt.column_iter_mut() {
            let v = rot * Vector2::new(col[0], col[1]);
            col[0] = v.x;
            col[1] = v.y;
        }
    }
    for (a, shift) in spec.translation.iter().take(dim).enumerate() {
        xt.row_mut(a).add_scalar_mut(*shift);
    }
    DomainDataset::new(xs, ys, xt, Some(yt))
}

/// Writes `domain,label,x1,...,xD`. Target labels are written only when
/// `with_target_labels` is set; otherwise the column holds `?`.
pub fn write_csv(data: &DomainDataset, path: &Path, with_target_labels: bool) -> Result<()> {
    let mut out = String::from("domain,label");
    for a in 1..=data.dim() {
        write!(out, ",x{a}").unwrap();
    }
    out.push('\n');
    let mut row = |domain: &str, label: Option<Label>, col: nalgebra::DVectorView<f64>| {
        out.push_str(domain);
        match label {
            Some(y) => write!(out, ",{y}").unwrap(),
            None => out.push_str(",?"),
        }
        for v in col.iter() {
            // Shortest round-trip representation.
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    };
    for (j, &y) in data.source_labels.iter().enumerate() {
        row("s", Some(y), data.source_points.column(j));
    }
    for j in 0..data.n_t() {
        let label = match (&data.target_labels_hidden, with_target_labels) {
            (Some(labels), true) => Some(labels[j]),
            _ => None,
        };
        row("t", label, data.target_points.column(j));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_label(field: &str, line: usize) -> Result<Option<Label>> {
    match field {
        "?" => Ok(None),
        "1" | "+1" => Ok(Some(1)),
        "-1" => Ok(Some(-1)),
        other => match other.parse::<f64>() {
            Ok(_) => Err(Error::Format(format!("line {line}: label {other} is not -1, +1 or ?"))),
            Err(_) => Err(Error::Parse {
                line,
                message: format!("label `{other}` is not a number"),
            }),
        },
    }
}

/// Reads the format written by [`write_csv`]. Target labels, when present on
/// every target row, become the hidden evaluation labels.
pub fn load_csv(path: &Path) -> Result<DomainDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<DomainDataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, header) = lines
        .by_ref()
        .find(|(_, l)| !l.is_empty())
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "empty file".into(),
        })?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    if fields.len() < 3 || fields[0] != "domain" || fields[1] != "label" {
        return Err(Error::Parse {
            line: 1,
            message: "header must be `domain,label,x1,...,xD`".into(),
        });
    }
    let dim = fields.len() - 2;
    let (mut xs, mut ys, mut xt, mut yt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (line, content) in lines {
        if content.is_empty() {
            continue;
        }
        let cells: Vec<&str> = content.split(',').map(str::trim).collect();
        if cells.len() != dim + 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", dim + 2, cells.len()),
            });
        }
        let label = parse_label(cells[1], line)?;
        let mut coords = Vec::with_capacity(dim);
        for cell in &cells[2..] {
            coords.push(cell.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("coordinate `{cell}` is not a number"),
            })?);
        }
        match cells[0] {
            "s" => {
                let y = label.ok_or_else(|| Error::Format(format!("line {line}: source row without a label")))?;
                xs.extend(coords);
                ys.push(y);
            }
            "t" => {
                xt.extend(coords);
                yt.push(label);
            }
            other => return Err(Error::Format(format!("line {line}: unknown domain `{other}`"))),
        }
    }
    let hidden = if yt.iter().all(Option::is_some) && !yt.is_empty() {
        Some(yt.iter().map(|y| y.unwrap()).collect())
    } else if yt.iter().all(Option::is_none) {
        None
    } else {
        return Err(Error::Format("target labels must be all present or all `?`".into()));
    };
    DomainDataset::new(
        RealMatrix::from_column_slice(dim, ys.len(), &xs),
        ys,
        RealMatrix::from_column_slice(dim, yt.len(), &xt),
        hidden,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Classical,
    QLinear,
    Vqd,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "classical" => Ok(Mode::Classical),
            "qlinear" => Ok(Mode::QLinear),
            "vqd" => Ok(Mode::Vqd),
            _ => Err(format!("unknown mode `{s}` (classical, qlinear, vqd)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Classical => "classical",
            Mode::QLinear => "qlinear",
            Mode::Vqd => "vqd",
        })
    }
}

fn sim_mode_name(mode: SimMode) -> &'static str {
    match mode {
        SimMode::Exact => "exact",
        SimMode::Circuit => "circuit",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Generated {
        shift: ShiftSpec,
        n_s: usize,
        n_t: usize,
        dim: usize,
    },
    Csv {
        path: PathBuf,
        /// Evaluation file in the same format carrying the true target labels.
        labels: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub dataset: DatasetSource,
    pub tca: TcaConfig,
    pub sim: LinearConfig,
    pub vqd: VqdConfig,
    pub xi_inv: f64,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Classical,
            dataset: DatasetSource::Generated {
                shift: ShiftSpec::default(),
                n_s: 8,
                n_t: 8,
                dim: 2,
            },
            tca: TcaConfig {
                kernel: Kernel::Rbf { bandwidth: None },
                ..TcaConfig::default()
            },
            sim: LinearConfig::default(),
            vqd: VqdConfig::default(),
            xi_inv: DEFAULT_XI_INV,
            seed: 0,
            output: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid value `{value}` for `{key}`"),
    })
}

fn parse_list(key: &str, value: &str, line: usize) -> Result<Vec<f64>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim(), line)).collect()
}

impl ExperimentConfig {
    /// Parses flat `key = value` lines; `#` starts a comment. Keys not
    /// mentioned keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, found `{content}`"),
            })?;
            cfg.set(key.trim(), value.trim(), i + 1)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn generated_mut(&mut self) -> &mut DatasetSource {
        if !matches!(self.dataset, DatasetSource::Generated { .. }) {
            self.dataset = Self::default().dataset;
        }
        &mut self.dataset
    }

    /// Applies one setting. `line` is used in error messages; pass 0 for
    /// command-line overrides.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "mode" => self.mode = value.parse().map_err(|message| Error::Parse { line, message })?,
            "seed" => self.seed = parse_value(key, value, line)?,
            "output" => self.output = Some(PathBuf::from(value)),
            "dataset.source" => match value {
                "generated" => {
                    self.generated_mut();
                }
                "csv" => {
                    if !matches!(self.dataset, DatasetSource::Csv { .. }) {
                        self.dataset = DatasetSource::Csv {
                            path: PathBuf::new(),
                            labels: None,
                        };
                    }
                }
                _ => {
                    return Err(Error::Parse {
                        line,
                        message: format!("dataset.source must be generated or csv, found `{value}`"),
                    })
                }
            },
            "dataset.path" | "dataset.labels" => {
                if !matches!(self.dataset, DatasetSource::Csv { .. }) {
                    self.dataset = DatasetSource::Csv {
                        path: PathBuf::new(),
                        labels: None,
                    };
                }
                if let DatasetSource::Csv { path, labels } = &mut self.dataset {
                    if key == "dataset.path" {
                        *path = PathBuf::from(value);
                    } else {
                        *labels = Some(PathBuf::from(value));
                    }
                }
            }
            "dataset.n_s" | "dataset.n_t" | "dataset.dim" | "dataset.separation" | "dataset.spread"
            | "dataset.rotation" | "dataset.translation" => {
                if let DatasetSource::Generated { shift, n_s, n_t, dim } = self.generated_mut() {
                    match key {
                        "dataset.n_s" => *n_s = parse_value(key, value, line)?,
                        "dataset.n_t" => *n_t = parse_value(key, value, line)?,
                        "dataset.dim" => *dim = parse_value(key, value, line)?,
                        "dataset.separation" => shift.separation = parse_value(key, value, line)?,
                        "dataset.spread" => shift.spread = parse_value(key, value, line)?,
                        "dataset.rotation" => shift.rotation = parse_value(key, value, line)?,
                        _ => shift.translation = parse_list(key, value, line)?,
                    }
                }
            }
            "tca.d" => self.tca.d = parse_value(key, value, line)?,
            "tca.mu" => self.tca.mu = parse_value(key, value, line)?,
            "tca.lambda" => self.tca.lambda_tradeoff = parse_value(key, value, line)?,
            "tca.kernel" => {
                self.tca.kernel = match value {
                    "linear" => Kernel::Linear,
                    "rbf" => Kernel::Rbf { bandwidth: None },
                    _ => {
                        return Err(Error::Parse {
                            line,
                            message: format!("tca.kernel must be linear or rbf, found `{value}`"),
                        })
                    }
                }
            }
            "tca.bandwidth" => {
                self.tca.kernel = Kernel::Rbf {
                    bandwidth: if value == "median" {
                        None
                    } else {
                        Some(parse_value(key, value, line)?)
                    },
                }
            }
            "sim.mode" => {
                self.sim.mode = match value {
                    "exact" => SimMode::Exact,
                    "circuit" => SimMode::Circuit,
                    _ => {
                        return Err(Error::Parse {
                            line,
                            message: format!("sim.mode must be exact or circuit, found `{value}`"),
                        })
                    }
                }
            }
            "sim.clock_qubits" => self.sim.clock_qubits = parse_value(key, value, line)?,
            "sim.dme_slices" => self.sim.dme_slices = parse_value(key, value, line)?,
            "sim.trotter_slices" => self.sim.trotter_slices = parse_value(key, value, line)?,
            "sim.extra_qubits" => self.sim.extra_qubits = parse_value(key, value, line)?,
            "vqd.layers" => self.vqd.layers = parse_value(key, value, line)?,
            "vqd.restarts" => self.vqd.restarts = parse_value(key, value, line)?,
            "vqd.stall_window" => self.vqd.stall_window = parse_value(key, value, line)?,
            "vqd.stall_tol" => self.vqd.stall_tol = parse_value(key, value, line)?,
            "vqd.max_iterations" => self.vqd.max_iterations = parse_value(key, value, line)?,
            "vqd.tolerance" => self.vqd.tolerance = parse_value(key, value, line)?,
            "svm.xi_inv" => self.xi_inv = parse_value(key, value, line)?,
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    /// Checks settings and paths before any work is done.
    pub fn validate(&self) -> Result<()> {
        if !(self.xi_inv > 0.0) || !self.xi_inv.is_finite() {
            return Err(Error::Parameter(format!("svm.xi_inv = {} must be positive", self.xi_inv)));
        }
        if self.sim.clock_qubits == 0 || self.sim.dme_slices == 0 || self.sim.trotter_slices == 0 {
            return Err(Error::Parameter(
                "sim.clock_qubits, sim.dme_slices and sim.trotter_slices must be positive".into(),
            ));
        }
        if self.vqd.layers == 0 || self.vqd.restarts == 0 || self.vqd.max_iterations == 0 {
            return Err(Error::Parameter(
                "vqd.layers, vqd.restarts and vqd.max_iterations must be positive".into(),
            ));
        }
        if let DatasetSource::Csv { path, labels } = &self.dataset {
            for p in std::iter::once(path).chain(labels) {
                if !p.is_file() {
                    return Err(Error::io(
                        p.clone(),
                        std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Serializes to the format read by [`ExperimentConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("mode", self.mode.to_string());
        kv("seed", self.seed.to_string());
        if let Some(o) = &self.output {
            kv("output", o.display().to_string());
        }
        match &self.dataset {
            DatasetSource::Generated { shift, n_s, n_t, dim } => {
                kv("dataset.source", "generated".into());
                kv("dataset.n_s", n_s.to_string());
                kv("dataset.n_t", n_t.to_string());
                kv("dataset.dim", dim.to_string());
                kv("dataset.separation", format!("{:?}", shift.separation));
                kv("dataset.spread", format!("{:?}", shift.spread));
                kv("dataset.rotation", format!("{:?}", shift.rotation));
                let t: Vec<String> = shift.translation.iter().map(|v| format!("{v:?}")).collect();
                kv("dataset.translation", t.join(","));
            }
            DatasetSource::Csv { path, labels } => {
                kv("dataset.source", "csv".into());
                kv("dataset.path", path.display().to_string());
                if let Some(l) = labels {
                    kv("dataset.labels", l.display().to_string());
                }
            }
        }
        kv("tca.d", self.tca.d.to_string());
        kv("tca.mu", format!("{:?}", self.tca.mu));
        kv("tca.lambda", format!("{:?}", self.tca.lambda_tradeoff));
        match self.tca.kernel {
            Kernel::Linear => kv("tca.kernel", "linear".into()),
            Kernel::Rbf { bandwidth } => kv(
                "tca.bandwidth",
                bandwidth.map_or_else(|| "median".into(), |b| format!("{b:?}")),
            ),
        }
        kv("sim.mode", sim_mode_name(self.sim.mode).into());
        kv("sim.clock_qubits", self.sim.clock_qubits.to_string());
        kv("sim.dme_slices", self.sim.dme_slices.to_string());
        kv("sim.trotter_slices", self.sim.trotter_slices.to_string());
        kv("sim.extra_qubits", self.sim.extra_qubits.to_string());
        kv("vqd.layers", self.vqd.layers.to_string());
        kv("vqd.restarts", self.vqd.restarts.to_string());
        kv("vqd.stall_window", self.vqd.stall_window.to_string());
        kv("vqd.stall_tol", format!("{:?}", self.vqd.stall_tol));
        kv("vqd.max_iterations", self.vqd.max_iterations.to_string());
        kv("vqd.tolerance", format!("{:?}", self.vqd.tolerance));
        kv("svm.xi_inv", format!("{:?}", self.xi_inv));
        out
    }

    pub fn load_dataset(&self) -> Result<DomainDataset> {
        match &self.dataset {
            DatasetSource::Generated { shift, n_s, n_t, dim } => generate_domains(shift, *n_s, *n_t, *dim, self.seed),
            DatasetSource::Csv { path, labels } => {
                let mut data = load_csv(path)?;
                if let Some(lp) = labels {
                    let truth = load_csv(lp)?;
                    if truth.target_points != data.target_points {
                        return Err(Error::Validation(format!(
                            "{} does not match the target rows of {}",
                            lp.display(),
                            path.display()
                        )));
                    }
                    data.target_labels_hidden = truth.target_labels_hidden;
                }
                Ok(data)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mode: Mode,
    pub seed: u64,
    pub n_s: usize,
    pub n_t: usize,
    pub d: usize,
    /// Trace-form MMD in units of the pooled RMS spread, on the raw data
    /// (configured kernel) and on the embedding (linear kernel).
    pub mmd_before: f64,
    pub mmd_after: f64,
    /// The same distances without the spread normalization.
    pub mmd_before_abs: f64,
    pub mmd_after_abs: f64,
    pub source_accuracy: f64,
    /// Against the hidden target labels, when available.
    pub target_accuracy: Option<f64>,
    /// The same classifier trained on the raw source features.
    pub baseline_target_accuracy: Option<f64>,
    /// Leading eigenvalues of `G`, descending.
    pub eigenvalues: Vec<f64>,
    /// Product of post-selection probabilities along the `ρ_G` chain.
    pub success_probability: Option<f64>,
    pub warnings: usize,
    /// Wall-clock milliseconds per stage, in execution order.
    pub timings: Vec<(&'static str, f64)>,
}

impl MetricsReport {
    /// `metric,value` rows for every deterministic field. Wall times are
    /// kept out so that reruns give identical bytes.
    pub fn metric_rows(&self) -> Vec<(String, String)> {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:?}"));
        let mut rows = vec![
            ("mode".to_string(), self.mode.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("n_s".into(), self.n_s.to_string()),
            ("n_t".into(), self.n_t.to_string()),
            ("d".into(), self.d.to_string()),
            ("mmd_before".into(), format!("{:?}", self.mmd_before)),
            ("mmd_after".into(), format!("{:?}", self.mmd_after)),
            ("mmd_before_abs".into(), format!("{:?}", self.mmd_before_abs)),
            ("mmd_after_abs".into(), format!("{:?}", self.mmd_after_abs)),
            ("source_accuracy".into(), format!("{:?}", self.source_accuracy)),
            ("target_accuracy".into(), opt(self.target_accuracy)),
            ("baseline_target_accuracy".into(), opt(self.baseline_target_accuracy)),
            ("success_probability".into(), opt(self.success_probability)),
            ("warnings".into(), self.warnings.to_string()),
        ];
        for (i, l) in self.eigenvalues.iter().enumerate() {
            rows.push((format!("eigenvalue_{}", i + 1), format!("{l:?}")));
        }
        rows
    }

    /// Inverse of [`MetricsReport::metric_rows`]; timings are left empty.
    pub fn from_metric_rows(rows: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            rows.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("metrics file lacks `{k}`")))
        };
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Format(format!("metric `{k}` has invalid value `{v}`")))
        }
        let opt = |k: &str| -> Result<Option<f64>> {
            match get(k)? {
                "NA" => Ok(None),
                v => num(k, v).map(Some),
            }
        };
        let mut eigenvalues = Vec::new();
        while let Some(v) = rows.get(&format!("eigenvalue_{}", eigenvalues.len() + 1)) {
            eigenvalues.push(num("eigenvalue", v)?);
        }
        Ok(Self {
            mode: get("mode")?.parse().map_err(Error::Format)?,
            seed: num("seed", get("seed")?)?,
            n_s: num("n_s", get("n_s")?)?,
            n_t: num("n_t", get("n_t")?)?,
            d: num("d", get("d")?)?,
            mmd_before: num("mmd_before", get("mmd_before")?)?,
            mmd_after: num("mmd_after", get("mmd_after")?)?,
            mmd_before_abs: num("mmd_before_abs", get("mmd_before_abs")?)?,
            mmd_after_abs: num("mmd_after_abs", get("mmd_after_abs")?)?,
            source_accuracy: num("source_accuracy", get("source_accuracy")?)?,
            target_accuracy: opt("target_accuracy")?,
            baseline_target_accuracy: opt("baseline_target_accuracy")?,
            success_probability: opt("success_probability")?,
            warnings: num("warnings", get("warnings")?)?,
            eigenvalues,
            timings: Vec::new(),
        })
    }
}

pub struct RunResult {
    pub report: MetricsReport,
    pub dataset: DomainDataset,
    pub model: TcaModel,
    pub embedding: Embedding,
    pub svm: SvmModel,
    pub target_predictions: Vec<Prediction>,
}

struct StageTimer {
    timings: Vec<(&'static str, f64)>,
}

impl StageTimer {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().stage(stage);
        self.timings.push((stage, start.elapsed().as_secs_f64() * 1e3));
        out
    }
}

fn columns(m: &RealMatrix) -> impl Iterator<Item = DVector<f64>> + '_ {
    m.column_iter().map(|c| c.into_owned())
}

/// Dataset → TCA (per mode) → embedding → SVM on the embedded source →
/// predictions for the embedded target, scored against hidden labels.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let mut timer = StageTimer { timings: Vec::new() };
    let data = timer.run("data", || cfg.load_dataset())?;
    let matrices = timer.run("kernel", || {
        cfg.tca.validate(data.n())?;
        build_g(&data, &cfg.tca)
    })?;
    let mut success_probability = None;
    let mut warnings = 0;
    let model = match cfg.mode {
        Mode::Classical => timer.run("tca", || solve_tca(&matrices, &cfg.tca))?,
        Mode::QLinear => {
            let solution = timer.run("qtca_linear", || solve_linear(&matrices, cfg.tca.d, &cfg.sim))?;
            success_probability = Some(solution.operators.cumulative_success());
            warnings += usize::from(solution.readout.degenerate);
            solution.model
        }
        Mode::Vqd => timer.run("qtca_vqd", || {
            let operators = prepare_operators(&matrices, &cfg.sim)?;
            success_probability = Some(operators.cumulative_success());
            let extended = build_g_tilde(&operators.rho_g.state)?;
            let deflation = vqd_solve(&extended, cfg.tca.d, &cfg.vqd, cfg.seed)?;
            warnings += deflation.warnings.len();
            extract_singular_pairs(&deflation, &matrices, operators.rho_g.trace)
        })?,
    };
    warnings += usize::from(model.degenerate_cut);
    let embedding = timer.run("embed", || embed(&matrices, &model))?;

    let quantum = cfg.mode != Mode::Classical;
    let train = |xs: &RealMatrix| -> Result<SvmModel> {
        if quantum {
            let clock = cfg.sim.clock_qubits;
            train_quantum(xs, &data.source_labels, cfg.xi_inv, clock, cfg.sim.mode)
        } else {
            train_classical(xs, &data.source_labels, cfg.xi_inv)
        }
    };
    let predict = |m: &SvmModel, points: &RealMatrix| -> Result<Vec<Prediction>> {
        columns(points)
            .map(|x| if quantum { predict_swaptest(m, &x) } else { predict_classical(m, &x) })
            .collect()
    };
    let svm = timer.run("svm_train", || train(&embedding.source))?;
    let (source_predictions, target_predictions) = timer.run("predict", || {
        Ok((predict(&svm, &embedding.source)?, predict(&svm, &embedding.target)?))
    })?;
    let baseline = match &data.target_labels_hidden {
        Some(truth) => Some(timer.run("baseline", || {
            let raw = train_classical(&data.source_points, &data.source_labels, cfg.xi_inv)?;
            let p: Vec<Prediction> = columns(&data.target_points)
                .map(|x| predict_classical(&raw, &x))
                .collect::<Result<_>>()?;
            Ok(accuracy(&p, truth))
        })?),
        None => None,
    };
    let (mmd_before, mmd_after, mmd_before_abs) = timer.run("mmd", || {
        let k = build_kernel(&data, &cfg.tca)?;
        Ok((
            relative_mmd(&k, data.n_s(), data.n_t())?,
            embedding.relative_mmd()?,
            mmd_from_kernel(&k, data.n_s(), data.n_t())?,
        ))
    })?;

    let report = MetricsReport {
        mode: cfg.mode,
        seed: cfg.seed,
        n_s: data.n_s(),
        n_t: data.n_t(),
        d: cfg.tca.d,
        mmd_before,
        mmd_after,
        mmd_before_abs,
        mmd_after_abs: embedding.mmd(),
        source_accuracy: accuracy(&source_predictions, &data.source_labels),
        target_accuracy: data
            .target_labels_hidden
            .as_ref()
            .map(|truth| accuracy(&target_predictions, truth)),
        baseline_target_accuracy: baseline,
        eigenvalues: model.eigenvalues.clone(),
        success_probability,
        warnings,
        timings: timer.timings,
    };
    Ok(RunResult {
        report,
        dataset: data,
        model,
        embedding,
        svm,
        target_predictions,
    })
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, content).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv`, `eigenvalues.csv`, `embedded.csv` and
/// `timings.csv` into `dir`, creating it if needed.
pub fn emit_metrics(result: &RunResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = &result.report;
    let seed = report.seed;

    let mut metrics = String::from("metric,value\n");
    for (k, v) in report.metric_rows() {
        writeln!(metrics, "{k},{v}").unwrap();
    }
    write_file(dir, "metrics.csv", &metrics)?;

    let mut eig = String::from("seed,mode,index,eigenvalue\n");
    for (i, l) in report.eigenvalues.iter().enumerate() {
        writeln!(eig, "{seed},{},{},{l:?}", report.mode, i + 1).unwrap();
    }
    write_file(dir, "eigenvalues.csv", &eig)?;

    let mut emb = String::from("seed,domain,label,predicted");
    for a in 1..=report.d {
        write!(emb, ",z{a}").unwrap();
    }
    emb.push('\n');
    let data = &result.dataset;
    for (j, col) in result.embedding.source.column_iter().enumerate() {
        write!(emb, "{seed},s,{},", data.source_labels[j]).unwrap();
        for v in col.iter() {
            write!(emb, ",{v:?}").unwrap();
        }
        emb.push('\n');
    }
    for (j, col) in result.embedding.target.column_iter().enumerate() {
        let label = data
            .target_labels_hidden
            .as_ref()
            .map_or_else(|| "?".to_string(), |l| l[j].to_string());
        write!(emb, "{seed},t,{label},{}", result.target_predictions[j].label).unwrap();
        for v in col.iter() {
            write!(emb, ",{v:?}").unwrap();
        }
        emb.push('\n');
    }
    write_file(dir, "embedded.csv", &emb)?;

    let mut times = String::from("seed,stage,wall_time_ms\n");
    for (stage, ms) in &report.timings {
        writeln!(times, "{seed},{stage},{ms:.3}").unwrap();
    }
    write_file(dir, "timings.csv", &times)
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected `metric,value`, found `{line}`"),
        })?;
        rows.insert(k.to_string(), v.to_string());
    }
    MetricsReport::from_metric_rows(&rows)
}

/// Worker count from `QTCA_THREADS`, defaulting to rayon's choice.
pub fn thread_count() -> Result<Option<usize>> {
    match std::env::var("QTCA_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Parameter(format!("QTCA_THREADS = `{v}` is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs `cfg` once per seed on a worker pool; results come back in seed order.
pub fn run_trials(cfg: &ExperimentConfig, seeds: &[u64], threads: Option<usize>) -> Result<Vec<Result<RunResult>>> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Parameter(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let cfg = ExperimentConfig {
                    seed,
                    ..cfg.clone()
                };
                run_experiment(&cfg)
            })
            .collect()
    }))
}

/// Mean of each numeric metric over several reports, in a fixed order.
pub fn summarize(reports: &[MetricsReport]) -> Vec<(String, f64)> {
    let mean = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> f64 {
        let vals: Vec<f64> = reports.iter().filter_map(f).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    vec![
        ("runs".into(), reports.len() as f64),
        ("mean_mmd_before".into(), mean(&|r| Some(r.mmd_before))),
        ("mean_mmd_after".into(), mean(&|r| Some(r.mmd_after))),
        ("mean_source_accuracy".into(), mean(&|r| Some(r.source_accuracy))),
        ("mean_target_accuracy".into(), mean(&|r| r.target_accuracy)),
        ("mean_baseline_target_accuracy".into(), mean(&|r| r.baseline_target_accuracy)),
        ("mean_success_probability".into(), mean(&|r| r.success_probability)),
    ]
}

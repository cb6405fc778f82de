use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not Hermitian (relative asymmetry {asymmetry:.3e})")]
    Symmetry { asymmetry: f64 },

    #[error("function undefined at eigenvalue {eigenvalue:e}")]
    Singularity { eigenvalue: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("ill-conditioned system: {0}")]
    Conditioning(String),

    #[error("phase range exceeded: {0}")]
    Range(String),

    #[error("rotation amplitude {amplitude} outside [-1, 1]")]
    RotationRange { amplitude: f64 },

    #[error("post-selection on register `{register}` failed (probability {probability:e})")]
    PostSelection { register: String, probability: f64 },

    #[error("state is not normalized: {0}")]
    Normalization(String),

    #[error("spectrum not resolvable at {clock_qubits} clock qubits; colliding pairs {pairs:?}")]
    Precision {
        clock_qubits: usize,
        pairs: Vec<(usize, usize)>,
    },

    #[error("lower block norm {norm:e} too small to split singular pair {index}")]
    DegenerateSplit { index: usize, norm: f64 },

    #[error("optimizer did not converge: {0}")]
    Convergence(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid dataset: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for input/validation problems,
    /// 3 for numerical and convergence failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Dimension(_)
            | Error::Parameter(_)
            | Error::Parse { .. }
            | Error::Format(_)
            | Error::Validation(_)
            | Error::Io { .. } => 2,
            _ => 3,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}

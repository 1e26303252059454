use std::path::PathBuf;

/// Errors raised anywhere in the refinement pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(String),
    #[error("guidance gradient norm {norm:.3e} exceeds {limit:.0e} at t={t}; reduce the guidance scale rho")]
    GradientOverflow { norm: f64, limit: f64, t: usize },
    #[error("non-finite latent at DDIM step t={t}")]
    NonFiniteLatent { t: usize },
    #[error("training produced a non-finite loss ({loss}) at step {step}: {diagnostics}")]
    NonFiniteLoss {
        loss: f64,
        step: usize,
        diagnostics: String,
    },
    #[error("weights file: {0}")]
    WeightsFormat(String),
    #[error("architecture mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    ArchitectureMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("scene generation failed for {kind} after {attempts} attempts")]
    SceneGeneration { kind: String, attempts: usize },
    #[error("refinement iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("unknown object template `{0}`")]
    UnknownTemplate(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

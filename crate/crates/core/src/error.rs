use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("unknown tape node {0}")]
    UnknownNode(usize),

    #[error("function value is not finite at coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid trajectory for patient {patient_id}: {reason}")]
    InvalidTrajectory { patient_id: String, reason: String },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("no header record")]
    MissingHeader,

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter norm {param_norm:.6e})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

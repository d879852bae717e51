use std::path::PathBuf;

use thiserror::Error;

use crate::trainer::TrainOutcome;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has near-zero norm")]
    ZeroNormRow { row: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("batch too small: need at least {need} rows, got {got}")]
    BatchTooSmall { need: usize, got: usize },

    #[error("operation needs at least two modalities")]
    SingleModality,

    #[error("theta {0} is outside [0, 180] degrees")]
    InvalidAngle(f64),

    #[error("target gap {target} is unreachable (closest attainable {closest})")]
    TargetUnreachable { target: f64, closest: f64 },

    #[error("labels are required for this operation")]
    LabelsMissing,

    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    DivergedLoss {
        epoch: usize,
        step: usize,
        last_good: Box<TrainOutcome>,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("output directory {0} already exists (use --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

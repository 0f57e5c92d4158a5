use std::path::PathBuf;

use thiserror::Error;

use crate::diffengine::EngineError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown concept `{name}`; valid names: {}", valid.join(", "))]
    UnknownConcept { name: String, valid: Vec<String> },
    #[error("intervention has no active or negated concept")]
    AllNeutral,
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: u64,
        reason: String,
        /// Parameters before the failing update.
        last_good: Box<crate::trainer::Checkpoint>,
    },
    #[error("gradient check failed at step {step}: relative error {max_rel_error:e} exceeds 1e-4")]
    GradientCheck { step: u64, max_rel_error: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

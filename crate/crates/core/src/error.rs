use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CimError>;

#[derive(Debug, Error)]
pub enum CimError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("tokenizer is frozen; parameter update rejected")]
    Frozen,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },

    #[error("incompatible checkpoint {path}: {reason}")]
    IncompatibleCheckpoint { path: PathBuf, reason: String },

    #[error("invalid evaluation setup: {0}")]
    InvalidEvaluation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl CimError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CimError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CimError::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CimError::Shape(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        CimError::Validation(msg.into())
    }
}

impl From<serde_json::Error> for CimError {
    fn from(e: serde_json::Error) -> Self {
        CimError::Serde(e.to_string())
    }
}

impl From<csv::Error> for CimError {
    fn from(e: csv::Error) -> Self {
        CimError::Serde(e.to_string())
    }
}

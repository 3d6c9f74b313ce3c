use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A hyper-parameter or layer configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API contract (e.g. backward from a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("malformed feature file {path}: {reason}")]
    FeatureFormat { path: PathBuf, reason: String },

    #[error("invalid annotation for {video_id}: {reason}")]
    Annotation { video_id: String, reason: String },

    #[error("non-finite loss at epoch {epoch}, step {step} (videos: {videos:?})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        videos: Vec<String>,
        dump: serde_json::Value,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

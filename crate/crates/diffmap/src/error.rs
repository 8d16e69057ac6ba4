//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad grid, bad schedule endpoints, incompatible
    /// checkpoint, head/width mismatch, ...). CLI exit code 2.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid or missing data on disk (malformed manifest, shape mismatch
    /// between manifest and payload, missing sample ids, ...). CLI exit code 3.
    #[error("data error: {0}")]
    Data(String),

    /// A caller violated an operation contract (shape mismatch, step index
    /// out of range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code for the CLI: 2 for configuration errors, 3 for data
    /// errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Data(_) => 3,
            _ => 1,
        }
    }
}

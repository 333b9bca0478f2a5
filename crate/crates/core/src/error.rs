use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An invalid configuration value (batch size 0, dropout p >= 1, ...).
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated (backward on a non-scalar, overlapping
    /// fold predictions, out-of-range intensity, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A manifest file failed to parse; carries the offending location.
    #[error("parse error in {path} (row {row}, column {column}): {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    /// A checkpoint file is malformed; `offset` is the byte position where
    /// decoding failed.
    #[error("checkpoint format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

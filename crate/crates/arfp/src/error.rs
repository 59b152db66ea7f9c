use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An embedding collapsed to zero norm and cannot be normalized.
    #[error("degenerate embedding: pre-normalization norm is {norm}")]
    DegenerateEmbedding { norm: f64 },

    /// Configuration file failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem or codec failure, with the path involved.
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },

    /// An experiment run failed part-way through.
    #[error("experiment failed in {label}: {message}")]
    Experiment { label: String, message: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

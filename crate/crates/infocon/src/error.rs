//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("data error in {path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("trajectory generation failed: {0}")]
    Generation(String),

    #[error(
        "sequence length {len} exceeds positional capacity {capacity}; \
         raise `encoder.window_len` in the model configuration"
    )]
    SequenceTooLong { len: usize, capacity: usize },

    #[error("training diverged at iteration {iteration}: total loss is {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("checkpoint error in {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Error {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 2 usage, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::Diverged { .. } => 4,
            _ => 3,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input or configuration violates a documented contract.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("failed to load record {record}: {reason}")]
    Load { record: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// Non-finite values during the forward pass or the loss.
    #[error("numeric error at step {step}: {message}")]
    Numeric { step: u64, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Architecture recorded in a checkpoint differs from the requested one.
    #[error("configuration mismatch:\n{0}")]
    ConfigMismatch(String),

    /// Invariant broken inside the library (a bug, not bad input).
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Load { .. } | Error::ConfigMismatch(_) => 2,
            _ => 3,
        }
    }
}

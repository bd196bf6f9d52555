use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied configuration (bad dims, unknown preset, ...).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("format error: {0}")]
    Format(String),

    /// Non-finite values or divergence during evaluation or training.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("enumeration too large: {0}")]
    Overflow(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Shape(_)
            | Error::Io { .. }
            | Error::Integrity(_)
            | Error::Version { .. }
            | Error::Format(_)
            | Error::Overflow(_) => 3,
            Error::Numerical(_) | Error::Tensor(_) => 4,
        }
    }
}

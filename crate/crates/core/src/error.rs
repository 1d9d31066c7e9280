//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch between tensors or parameter sets.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid argument to an operation.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input file does not match the configured schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Input file is structurally invalid (depth order, spacing, cells).
    #[error("format error: {0}")]
    Format(String),

    /// A forward cache used with parameters it was not built from.
    #[error("state error: {0}")]
    State(String),

    /// Attention window where every key position is masked.
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

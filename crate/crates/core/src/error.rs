//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file; carries the 1-based line number when known.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// File content disagrees with the declared layout (channel count,
    /// sample rate, header shape).
    #[error("schema error in {path}: {msg}")]
    Schema { path: String, msg: String },

    /// A value is outside its documented domain.
    #[error("validation error: {0}")]
    Validation(String),

    /// Inconsistent or unsatisfiable configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor/layer shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Operation called in the wrong object state.
    #[error("state error: {0}")]
    State(String),

    /// Filter design failure (e.g. cutoff at or above Nyquist).
    #[error("design error: {0}")]
    Design(String),

    /// Signal too short for the requested operation.
    #[error("length error: {0}")]
    Length(String),

    /// NaN/Inf encountered during training.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

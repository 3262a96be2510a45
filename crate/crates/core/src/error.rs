//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the recovery library.
#[derive(Debug, Error)]
pub enum Error {
    /// Arguments violate a precondition (bad dimension, nonpositive value,
    /// out-of-range index, mismatched ensemble/measurement pair, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A required input collection was empty.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// The iterative eigensolver did not reach the requested residual.
    #[error("eigensolver did not converge within its iteration budget (best residual {best_residual:e})")]
    ConvergenceFailure {
        /// Largest per-column residual actually achieved, or infinity when
        /// the backend produced no factorization at all.
        best_residual: f64,
    },

    /// A serialized ensemble or measurement file failed validation.
    #[error("malformed file: {0}")]
    MalformedFile(String),

    /// Underlying I/O failure while reading or writing artifacts.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

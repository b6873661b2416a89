//! Crate-wide error type. Every fallible operation reports enough context to
//! identify the failing call site without a debugger.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are not conformable for the named operation.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Argument outside the operation's domain (zero divisor, negative log,
    /// zero-norm row, non-positive steepness, index out of bounds, ...).
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    /// Underlying I/O failure.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed artifact: bad magic, truncated blob, manifest mismatch.
    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }
}

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WauError {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A precondition on arguments was violated.
    #[error("{op}: contract violation: {detail}")]
    Contract { op: &'static str, detail: String },

    /// NaN or infinity surfaced in an operation output.
    #[error("{op}: non-finite value in {role}")]
    NonFinite { op: &'static str, role: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("arithmetic overflow while evaluating {0}")]
    Overflow(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = WauError> = std::result::Result<T, E>;

impl WauError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        WauError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        WauError::Contract {
            op,
            detail: detail.into(),
        }
    }
}

use thiserror::Error;

/// Errors raised by the library.
///
/// `InvalidInput` and `DimensionMismatch` are contract violations: the caller
/// handed over something the operation is not defined for.
#[derive(Debug, Error)]
pub enum CopsError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("information matrix is singular: {0}")]
    SingularInformation(String),

    #[error("label oracle failed on row {index}: {reason}")]
    Labeling { index: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl CopsError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CopsError::InvalidInput(msg.into())
    }

    pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
        if expected == found {
            Ok(())
        } else {
            Err(CopsError::DimensionMismatch {
                what,
                expected,
                found,
            })
        }
    }
}

pub type Result<T> = std::result::Result<T, CopsError>;

use thiserror::Error;

use crate::backbone::trace::TraceError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: String, found: String },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("timestep ordering violated: {0}")]
    Ordering(String),

    #[error("insufficient history: need {needed} FULL outputs, have {have}")]
    InsufficientHistory { needed: usize, have: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error(transparent)]
    Trace(#[from] TraceError),
}

impl Error {
    pub(crate) fn shape(expected: (usize, usize), found: (usize, usize)) -> Self {
        Error::Dimension {
            expected: format!("{}x{}", expected.0, expected.1),
            found: format!("{}x{}", found.0, found.1),
        }
    }

    pub(crate) fn length(what: &str, expected: usize, found: usize) -> Self {
        Error::Dimension {
            expected: format!("{what} of length {expected}"),
            found: format!("length {found}"),
        }
    }
}

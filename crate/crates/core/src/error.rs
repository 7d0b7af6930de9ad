use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes shared by every algorithm in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent arguments.
    #[error("invalid input: {0}")]
    Input(String),

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Every particle weight vanished at `step` (0-based).
    #[error("particle weights degenerate at step {step}")]
    Degeneracy { step: usize },

    /// The model lacks a density, gradient or linearization the algorithm needs.
    #[error("capability missing: {0}")]
    Capability(String),

    /// Numerical breakdown, e.g. a singular innovation covariance.
    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },

    /// A learner produced a non-finite quantity; `iterate` is the last good one.
    #[error("non-finite value in iteration {iteration}: {message}")]
    NonFinite {
        iteration: usize,
        iterate: Vec<f64>,
        message: String,
    },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn capability(msg: impl Into<String>) -> Self {
        Error::Capability(msg.into())
    }

    /// True for failures caused by weight collapse during filtering.
    pub fn is_degeneracy(&self) -> bool {
        matches!(self, Error::Degeneracy { .. })
    }
}

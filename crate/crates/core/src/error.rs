//! Error types shared across the simulator.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, SktError>;

#[derive(Debug, Error)]
pub enum SktError {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// No reversible measure exists for the coefficient matrix.
    #[error("detailed balance infeasible: {reason}")]
    Infeasible {
        reason: String,
        /// Species indices of the violating cycle (closed: first == last), if any.
        cycle: Option<Vec<usize>>,
    },

    #[error("Newton iteration failed at t = {t} (last residual {residual:e})")]
    NewtonFailure { t: f64, residual: f64 },

    #[error("norm report unavailable: {0}")]
    NormUnavailable(String),

    #[error("every ensemble path stopped at the blow-up guard")]
    EnsembleDegenerate,

    #[error("configuration rejected by {assumption}: {message}")]
    ConfigRejected {
        assumption: String,
        message: String,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SktError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        SktError::Domain(msg.into())
    }

    pub(crate) fn rejected(assumption: &str, message: impl Into<String>) -> Self {
        SktError::ConfigRejected {
            assumption: assumption.to_string(),
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for SktError {
    fn from(e: serde_json::Error) -> Self {
        SktError::Parse(e.to_string())
    }
}

impl From<csv::Error> for SktError {
    fn from(e: csv::Error) -> Self {
        SktError::Parse(e.to_string())
    }
}

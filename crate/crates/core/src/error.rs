//! Error taxonomy shared across the framework.
//!
//! Variants map onto the failure classes the modules report: bad
//! configuration, corpus ingestion problems, contract violations by callers,
//! budget exhaustion, malformed inputs, sampling/evaluation failures, and
//! non-finite numerics.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// A charge was rejected because it would push `spent` past `total`.
    /// No partial charge is recorded; the caller must stop the phase.
    #[error("budget exhausted: spent {spent}/{total}, refused charge of {requested}")]
    BudgetExhausted {
        spent: u64,
        total: u64,
        requested: u64,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// A loss component came out non-finite; `component` names it.
    #[error("numerical error in {component}: {value}")]
    Numerical { component: &'static str, value: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// True for errors caused by user-supplied configuration rather than
    /// runtime state. The CLI maps these to a distinct exit code.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Ingestion(_))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

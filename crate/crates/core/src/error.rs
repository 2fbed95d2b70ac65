//! Error types shared across the engine.

use thiserror::Error;

/// Failures raised by a pluggable backend or by the host-side checks that
/// guard its contract.
#[derive(Debug, Error)]
pub enum BackendError {
    /// The transport failed after exhausting retries. Carries the per-attempt log.
    #[error("transport failure after {attempts} attempts: {detail}")]
    Transport { attempts: usize, detail: String },
    /// The response violated the protocol or a host-enforced invariant.
    /// Contract errors are never retried.
    #[error("backend contract violation: {0}")]
    Contract(String),
    /// Backend-reported failure (propagated diagnostic).
    #[error("backend failure: {0}")]
    Other(String),
}

#[derive(Debug, Error)]
pub enum EvoError {
    #[error("no views")]
    NoViews,
    #[error("no prior")]
    NoPrior,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("checkpoint integrity: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}, view {view}")]
    NumericAbort { step: usize, view: usize },
}

impl EvoError {
    /// True when the error originated in a backend contract violation,
    /// which callers map to a dedicated exit code.
    pub fn is_contract(&self) -> bool {
        matches!(self, EvoError::Backend(BackendError::Contract(_)))
    }
}

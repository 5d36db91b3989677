use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("t = {t} is outside [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("degenerate coupling plan: row {row} has zero mass")]
    DegeneratePlan { row: usize },

    #[error("singular variance at t = {t} (sigma_t = 0 with floor disabled)")]
    SingularVariance { t: f64 },

    #[error("training diverged at step {step}: non-finite loss")]
    TrainingDiverged { step: usize },

    #[error("integration diverged at step {step}: non-finite state")]
    IntegrationDiverged { step: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("transport solver failed: {0}")]
    Solver(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

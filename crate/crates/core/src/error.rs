use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("cell {to:?} is unreachable from {from:?}")]
    Unreachable { from: (usize, usize), to: (usize, usize) },

    #[error("unknown map `{0}`")]
    UnknownMap(String),

    #[error("step called on a finished episode")]
    EpisodeFinished,

    #[error("linear system is singular")]
    Singular,

    #[error("log-probability drift: rollout recorded {recorded}, recomputed {recomputed}")]
    SamplingDrift { recorded: f64, recomputed: f64 },

    #[error("no usable data: {0}")]
    NoData(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

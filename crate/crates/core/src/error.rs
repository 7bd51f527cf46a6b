use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate bucket layout: {0}")]
    DegenerateLayout(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("Cholesky factorization failed after jitter escalation (jitter reached {max_jitter:.3e})")]
    Cholesky { max_jitter: f64 },

    #[error("feature count {got} exceeds model capacity {capacity}")]
    Capacity { got: usize, capacity: usize },

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("checkpoint is corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {got} not supported (expected {expected})")]
    CheckpointVersion { got: u32, expected: u32 },

    #[error("search space exhausted: every candidate has already been evaluated")]
    ExhaustedSpace,

    #[error("hyperparameter fit failed: {0}")]
    FitFailed(String),

    #[error("objective evaluation failed twice in a row: {0}")]
    ObjectiveFailed(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] clockattn_core::Error),
    #[error("invalid field spec: {0}")]
    FieldSpec(String),
    #[error("covariance is not positive definite even with jitter {jitter:e}")]
    Cholesky { jitter: f64 },
    #[error("field must be stationary (constant mean path)")]
    NonStationary,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

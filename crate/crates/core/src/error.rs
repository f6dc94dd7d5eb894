use thiserror::Error;

#[derive(Debug, Error)]
pub enum KopeError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate phase pair at flat index {index} (norm {norm:e})")]
    DegeneratePhase { index: usize, norm: f64 },

    #[error("evaluation produced a non-finite value: {0}")]
    Evaluation(String),

    #[error("invalid configuration: {0}")]
    Configuration(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("training diverged at step {step} (loss {loss:e})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KopeError>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(KopeError::Dimension {
        op,
        detail: detail.into(),
    })
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TtmError {
    /// Input violates a documented invariant. Carries every violation found.
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("tracker lost the object in {lost} of {total} frames")]
    TrackLost { lost: usize, total: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl TtmError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        TtmError::Validation(vec![msg.into()])
    }

    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            TtmError::Validation(_) | TtmError::Shape(_) | TtmError::Json(_)
        )
    }
}

pub type Result<T, E = TtmError> = std::result::Result<T, E>;

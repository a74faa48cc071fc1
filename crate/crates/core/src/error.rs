use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("empty batch")]
    EmptyBatch,

    #[error("batch too small: need at least {min}, got {got}")]
    BatchTooSmall { min: usize, got: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("not enough candidate clusters: need {needed}, {available} survive the size filter")]
    NotEnoughClusters { needed: usize, available: usize },

    #[error("invalid ranking: {0}")]
    InvalidRanking(String),

    #[error("labeling session aborted")]
    Aborted,

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("bitstream error: {0}")]
    Bitstream(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage ordering: {0}")]
    StageOrder(String),

    #[error("non-finite loss at iteration {iteration} (batch {batch_index}): {breakdown}")]
    NonFiniteLoss {
        iteration: u64,
        batch_index: u64,
        breakdown: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from caller input rather than a broken internal invariant.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Invariant(_))
    }
}

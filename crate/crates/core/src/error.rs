use std::path::PathBuf;

/// Errors raised anywhere in the pre-filling pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate attention: {0}")]
    DegenerateAttention(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("bad value for config key `{key}`: {reason}")]
    BadConfigValue { key: String, reason: String },

    #[error("patients missing from split manifest: {0:?}")]
    MissingSplit(Vec<String>),

    #[error("vision backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("cannot read image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("malformed PPM header: {0}")]
    PpmHeader(String),

    #[error("PPM payload truncated: expected {expected} bytes, got {actual}")]
    PpmPayload { expected: usize, actual: usize },

    #[error("unsupported PPM maxval {0} (only 255 is supported)")]
    PpmMaxval(u32),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint was trained against a different base (checksum mismatch)")]
    BaseMismatch,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

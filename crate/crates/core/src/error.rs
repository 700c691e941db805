use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid probe spec: {0}")]
    ProbeSpec(String),

    #[error("pooling error: {0}")]
    Pooling(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("attack error: {0}")]
    Attack(String),

    #[error("unsupported loss: {0}")]
    UnsupportedLoss(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

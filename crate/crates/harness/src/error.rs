use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("results store: {0}")]
    Store(String),

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Core(#[from] diffprobe::Error),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("cannot parse config: {0}")]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Errors that mean the run was mis-specified rather than that it failed
    /// part-way.
    pub fn is_config(&self) -> bool {
        use diffprobe::Error as E;
        match self {
            HarnessError::Config(_) | HarnessError::Toml(_) => true,
            HarnessError::Core(e) => matches!(
                e,
                E::Config(_) | E::ProbeSpec(_) | E::Pooling(_) | E::Schedule(_) | E::TimestepOutOfRange { .. }
            ),
            _ => false,
        }
    }
}

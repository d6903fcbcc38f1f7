use sailr_core::SailrError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error(transparent)]
    Core(#[from] SailrError),
    #[error("configuration error: {0}")]
    Config(String),
    /// Non-finite parameters, or returns that stayed collapsed for too long.
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("environment fault: {0}")]
    Environment(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LearnError>;

pub(crate) fn config(msg: impl Into<String>) -> LearnError {
    LearnError::Config(msg.into())
}

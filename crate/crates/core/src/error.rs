use thiserror::Error;

#[derive(Debug, Error)]
pub enum SailrError {
    /// Shapes or indices that do not fit together.
    #[error("structural error: {0}")]
    Structural(String),
    /// A model or policy table that breaks one of its invariants.
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("resource budget exceeded: {0}")]
    Budget(String),
    #[error("no convergence: {0}")]
    NonConvergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SailrError>;

pub(crate) fn structural(msg: impl Into<String>) -> SailrError {
    SailrError::Structural(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> SailrError {
    SailrError::InvalidModel(msg.into())
}

use std::path::PathBuf;

use sailr_core::SailrError;
use sailr_learn::LearnError;
use thiserror::Error;

pub const EXIT_OK: u8 = 0;
/// A theory check failed that was not predicted to fail.
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    /// An input file that could not be read or did not validate.
    #[error("bad input {path}")]
    Input {
        path: PathBuf,
        #[source]
        source: SailrError,
    },
    #[error("inputs come from different configurations: {0}")]
    Mixed(String),
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] SailrError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Input { .. } | CliError::Mixed(_) => EXIT_USAGE,
            CliError::Learn(LearnError::Config(_)) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}

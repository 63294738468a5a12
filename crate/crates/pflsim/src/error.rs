use std::path::{Path, PathBuf};

use pflsim_core::config::ConfigError;
use pflsim_core::data::DataError;
use pflsim_core::federation::{FederationError, RunFailure};
use pflsim_core::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {reason}", path.display())]
    Line { path: PathBuf, line: usize, reason: String },
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("{}: {reason}", path.display())]
    Data { path: PathBuf, reason: DataError },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error("training aborted after {} epoch records: {}", .0.history.records.len(), .0.error)]
    Run(Box<RunFailure>),
    #[error("{0}")]
    Usage(String),
}

impl From<RunFailure> for Error {
    fn from(f: RunFailure) -> Self {
        Error::Run(Box::new(f))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

pub(crate) fn format_err(path: &Path, reason: impl std::fmt::Display) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.to_string() }
}

use std::path::PathBuf;

use bws_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: parse error at byte {offset}: {reason}")]
    Parse { path: PathBuf, offset: usize, reason: String },

    #[error("{0}")]
    Contract(String),

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Resource(String),

    #[error("non-finite loss at step {step}: {components}")]
    NonFinite { step: usize, components: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

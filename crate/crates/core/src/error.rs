use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("integration diverged at t = {time}")]
    Divergence { time: f64 },
    #[error("undefined loss: {0}")]
    UndefinedLoss(String),
    #[error("training diverged at epoch {epoch}")]
    Training { epoch: usize },
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("invalid file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical blow-up during training or integration, as opposed to bad
    /// input.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::Training { .. } | Error::Tensor(TensorError::NonFinite { .. }))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

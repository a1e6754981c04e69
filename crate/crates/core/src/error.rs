use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = BracError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BracError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared while training.
    #[error("training diverged in `{op}` at step {step}: {detail}")]
    Training {
        op: String,
        step: u64,
        detail: String,
    },

    #[error("format error in {path:?}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("incomplete grid, missing cells: {0:?}")]
    IncompleteGrid(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl BracError {
    pub(crate) fn training(op: impl Into<String>, step: u64, detail: impl Into<String>) -> Self {
        Self::Training {
            op: op.into(),
            step,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

use std::path::PathBuf;

use medfuse_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{}:{line}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error("variable id {id} is outside the {n_variables} known variables")]
    UnknownVariable { id: usize, n_variables: usize },

    #[error("sequence needs positional index {needed} but the position table holds {limit}")]
    PositionOverflow { needed: usize, limit: usize },

    #[error("attention row {row} has no visible keys")]
    EmptyAttentionRow { row: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

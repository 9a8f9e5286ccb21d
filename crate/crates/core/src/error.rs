use thiserror::Error;

use crate::backbone::CheckpointError;
use crate::numerics::NumericsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}: no data")]
    EmptyData(&'static str),
    #[error("expected {expected} feature columns, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("batch has no augmented views")]
    MissingAugmentation,
    #[error("batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("labels ({labels}) and rows ({rows}) disagree")]
    LabelCount { labels: usize, rows: usize },
    #[error("cannot normalize a zero-norm feature vector")]
    ZeroNorm,
    #[error("no prototypes have been fitted")]
    NoPrototypes,
    #[error("unknown scoring method '{0}'")]
    UnknownMethod(String),
    #[error("index {index} out of range (size {size})")]
    Index { index: usize, size: usize },
    #[error("malformed metric matrix: {0}")]
    MalformedMatrix(String),
}

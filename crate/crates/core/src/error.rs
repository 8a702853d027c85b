use std::path::PathBuf;

use alm_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("band sizes sum to {actual}, vocabulary has {expected} entries")]
    BandSum { expected: usize, actual: usize },
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("partition mismatch between input and output layers: {0}")]
    PartitionMismatch(String),
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("example {index} has {len} tokens, exceeding the token budget {budget}")]
    ExampleTooLong { index: usize, len: usize, budget: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error("non-finite {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

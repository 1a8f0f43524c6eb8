use cfam_autodiff::GraphError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("data: {0}")]
    Data(String),
    #[error("model mismatch: {0}")]
    Mismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("metric needs at least one positive and one negative label")]
    SingleClass,
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

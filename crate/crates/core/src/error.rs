use thiserror::Error;

/// Errors raised by layout construction, attention kernels, the model and the cache engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("length {len} is not divisible by {divisor}")]
    NonDivisibleLength { len: usize, divisor: usize },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("layout does not match tensors: {0}")]
    LayoutMismatch(String),

    #[error("invalid chunk size {chunk} for ratio {ratio}")]
    InvalidChunkSize { chunk: usize, ratio: usize },

    #[error("inconsistent decode state: {0}")]
    InconsistentState(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

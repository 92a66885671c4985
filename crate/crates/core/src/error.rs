use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("attention row {row} is fully masked")]
    Mask { row: usize },

    #[error("normalizer is zero for row {row}")]
    Division { row: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    Vocab { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("batch has no non-pad targets")]
    EmptyBatch,

    #[error("function is not deterministic: baseline evaluations {first} and {second} differ")]
    Determinism { first: f64, second: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

use std::io;

use thiserror::Error;

/// Errors produced by the model, pool, retrieval and training code.
#[derive(Debug, Error)]
pub enum IntraError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("token id {token} out of range (vocab size {vocab_size})")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("sequence of length {len} exceeds max positions {max}")]
    TooLong { len: usize, max: usize },

    #[error("position {position} out of range for sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("duplicate chunk id {0}")]
    DuplicateChunk(u64),

    #[error("unknown chunk id {0}")]
    UnknownChunk(u64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("non-finite gradient at {0}")]
    NonFiniteGradient(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl IntraError {
    /// Whether the error comes from bad input data rather than from a broken invariant.
    pub fn is_data_error(&self) -> bool {
        !matches!(
            self,
            IntraError::NonFinite(_) | IntraError::NonFiniteGradient(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, IntraError>;

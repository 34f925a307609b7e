//! Encoder-decoder retrieval over a pre-encoded chunk pool.
//!
//! One small transformer both scores pool chunks with its own cross-attention
//! queries and generates answers from the same stored encoder states.

pub mod baselines;
pub mod data;
pub mod error;
pub mod io_util;
pub mod model;
pub mod qa;
pub mod retrieval;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{IntraError, Result};
pub use model::{Model, ModelConfig, ModelWeights, WeightInit};
pub use tensor::Matrix;

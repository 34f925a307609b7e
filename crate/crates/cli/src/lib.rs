//! Command-line wiring for corpus generation, pool building, retrieval
//! training, evaluation and benchmarking.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, ErrorKind};

//! Std companion of `geomformer-core`: N-body dataset files, checkpoints,
//! the training driver, flat JSON configuration and the `geomf` command
//! line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod report;
pub mod trainer;

pub use error::{CliError, Result};

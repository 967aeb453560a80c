//! Reproducible command-line runs over the segmentation core: corpus
//! synthesis, training, evaluation, single-pair prediction and the
//! attention memory benchmark.

pub mod commands;
pub mod config;
mod error;

pub use error::{CliError, Result};

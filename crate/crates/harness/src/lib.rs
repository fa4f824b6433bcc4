//! Configuration, on-disk formats and experiment orchestration for the
//! `sadag` command-line tool.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod format;
pub mod metrics;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};

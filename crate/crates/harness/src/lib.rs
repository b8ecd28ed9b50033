//! Experiment harness: configuration, orchestration, result files, figures
//! and the remote transfer client.

pub mod config;
pub mod error;
pub mod experiments;
pub mod predict;
pub mod remote;
pub mod results;
pub mod svg;

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::{Error, Result};
pub use experiments::{run, Outputs};

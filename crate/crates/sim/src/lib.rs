//! Experiment harness around `biobackdoor-core`: configuration, the staged
//! pipeline, file formats and the run manifest.

pub mod config;
pub mod error;
pub mod experiments;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod stages;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};

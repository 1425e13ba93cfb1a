//! Experiment harness: configuration, checkpoint index, stage orchestration,
//! evaluation and plotting for the two-stage motion generation pipeline.

pub mod config;
pub mod error;
pub mod experiment;
pub mod pipeline;
pub mod plot;

pub use config::{RunConfig, VlmMode};
pub use error::{HarnessError, Result};
pub use experiment::Experiment;
pub use pipeline::{Pipeline, RunSummary};

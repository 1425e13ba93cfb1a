//! Neural components of the two-stage motion generation pipeline.

pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod generators;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod reasoner;
pub mod rvq;
pub mod sampling;
pub mod vae;

pub use error::{Error, Result};

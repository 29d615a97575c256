//! Training, checkpointing and command-line tooling for decision propagation
//! networks built on `dpn-core`.

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod dataset;
pub mod decisions;
mod error;
pub mod trainer;

pub use error::{Result, RunError};

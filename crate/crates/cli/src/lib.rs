//! Command-line orchestration of the unit translation pipeline: corpus
//! generation, encoder and translator training, translation, evaluation,
//! ablation sweeps and embedding export.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod failure;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use failure::{Failure, FailureKind};

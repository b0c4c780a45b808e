//! Orchestration for dualdiff: configuration, checkpoints, training,
//! sampling, evaluation, ablations, noise analysis and model statistics.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod noise;
pub mod sample;
pub mod stats;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;

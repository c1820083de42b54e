//! Experiment harness: configuration, the training loop, gradient-variance
//! measurements, reports and plots.

pub mod config;
pub mod metrics;
pub mod plot;
pub mod train;
pub mod variance_lab;
pub mod verify;

pub use config::RunConfig;
pub use train::{train, RunManifest, TrainOutput};

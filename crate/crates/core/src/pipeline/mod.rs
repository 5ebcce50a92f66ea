pub mod config;
pub mod crossval;
pub mod eval;
pub mod gradcheck;
pub mod report;
pub mod train;

pub use config::{AdamConfig, ExperimentConfig, TrainConfig};

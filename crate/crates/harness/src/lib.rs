//! Experiment orchestration for `scat-core`: scene suites, training,
//! the comparison experiments and run records.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod record;
pub mod suite;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{HarnessError, HarnessResult};
pub use record::RunRecord;

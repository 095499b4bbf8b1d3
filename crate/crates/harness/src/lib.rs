//! Experiment harness: configuration, the sealed label side channel, the
//! batch-by-batch runner with metrics persistence, and report generation.

pub mod config;
pub mod records;
pub mod report;
pub mod runner;
pub mod seal;

pub use config::{RunConfig, TaskSpec, TrainSpec};
pub use records::{BatchRecord, Record, SummaryRecord};
pub use runner::{run_cell, run_experiment, sweep_threshold, SourceCache};

//! Experiment harness for model-based context detection: configuration,
//! presets, baselines, the zero-delay oracle, CEM planning, run logs,
//! metrics and detection benchmarks.
//!
//! Every baseline is an [`mbcd_core::agent::MbcdAgent`] with different
//! configuration values (see [`config::Variant::configure`]), so the
//! comparison never depends on separate code paths.

pub mod bench;
pub mod config;
pub mod error;
pub mod metrics;
pub mod mpc;
pub mod oracle;
pub mod presets;
pub mod report;
pub mod runlog;
pub mod runner;

pub use config::{ExperimentConfig, Variant};
pub use error::{HarnessError, Result};
pub use runlog::{RunLog, StepRecord};
pub use runner::{run_experiment, simulate};

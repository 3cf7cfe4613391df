//! Experiment harness: configuration parsing, per-kind runners, manifest
//! writing. The binary in `main.rs` is a thin wrapper over this library
//! so the integration tests can drive runs in-process.

pub mod config;
pub mod run;

pub use config::{CliError, CliResult, ExperimentConfig, ExperimentKind};
pub use run::{run, RunOutcome};

//! Config-driven experiment runner, CSV output and CLI.

pub mod check;
pub mod cli;
pub mod config;
pub mod report;
pub mod runner;

pub use cli::cli_main;
pub use config::{ExperimentConfig, FULL_PRECISION_BITS};
pub use report::{emit_csv, write_csv};
pub use runner::{run_experiment, run_seed, SeedRun};

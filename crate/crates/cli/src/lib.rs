//! Configuration-driven experiment runner behind the `arml` binary.

pub mod config;
pub mod run;

pub use config::{ConfigError, ExperimentConfig, TheoryGame};
pub use run::{Checkpoint, CliError};

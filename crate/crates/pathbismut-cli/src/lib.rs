//! Config-driven experiment runner for the `pathbismut` estimators.
//!
//! A TOML file names a model, grid, initial law, test functional, direction
//! and estimator flavor; [`registry::Experiment`] validates it and
//! [`commands`] runs it and writes JSON/CSV reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod registry;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use registry::Experiment;

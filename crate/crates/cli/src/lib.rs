//! Experiment driver for `setpose`: dataset generation, training, solver
//! comparison, set evaluation, ablation and single-record metrics.
//!
//! Every command is a pure function of its JSON config and input files.
//! Outputs carry the command name, config SHA-256 and seed.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod output;
pub mod stats;

pub use error::{CliError, CliResult};

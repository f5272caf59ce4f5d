//! File formats, experiment runner and command line for `dualtune-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod output;
pub mod verify;

pub use error::{CliError, Result};

//! Command-line driver: configuration, persisted state and the pipeline
//! commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod state;

pub use error::{exit, CliError};

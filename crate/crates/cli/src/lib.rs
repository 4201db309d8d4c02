//! Library behind the `maediff` binary: run configuration, subcommands,
//! evaluation protocol and PNG panels.

pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod panels;

pub use config::RunConfig;
pub use error::{CliError, Result};

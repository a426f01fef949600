//! Command-line front end: configuration, artifact writing and the
//! subcommands of the `rsmp` binary.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod table;

pub use commands::{run, Cli, Command};
pub use config::RunConfig;
pub use error::CliError;

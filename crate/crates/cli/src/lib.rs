//! Library side of the `ppf` binary: run configuration, exit-status mapping
//! and the subcommands themselves.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;

//! Library half of the `ndg` command-line tool: config files, checkpoints
//! and the subcommands themselves, exposed so they can be driven from tests.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use error::CliError;

//! Library side of the `kws` binary: configuration handling and the
//! subcommands, callable from tests.

pub mod commands;
pub mod config;
mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};

//! Library side of the `cos` binary: argument definitions, run
//! configuration, backends and subcommand implementations.

pub mod args;
pub mod commands;
pub mod config;
pub mod io;
pub mod remote;

pub use args::Cli;
pub use commands::run;
pub use config::{RunConfig, UsageError};

//! Configuration, sweeps and artifact output for the `duca` command.

pub mod config;
pub mod runner;

pub use config::{Config, ConfigError, Overrides};
pub use runner::{cmd_bounds, cmd_run, cmd_validate, CliError};

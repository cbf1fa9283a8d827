//! Command implementations behind the `neuroevo` binary.

pub mod commands;
pub mod config;

pub use commands::Role;
pub use config::{ConfigError, RunConfig};

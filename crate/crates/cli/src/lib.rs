//! Configuration and subcommands of the `mapkit` tool.

pub mod commands;
pub mod config;

pub use commands::{Output, PretrainMode};
pub use config::RunConfig;

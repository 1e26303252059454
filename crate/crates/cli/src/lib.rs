//! Command implementations behind the `hoirefine` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_eval, cmd_gen_data, cmd_optimize, cmd_sweep, cmd_train};
pub use config::RunConfig;
pub use error::CliError;

//! File formats, pipeline stages and subcommands for the `vdtq` tool.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod tensor_file;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use report::Report;

/// Environment variable that overrides the default output directory.
pub const OUT_DIR_ENV: &str = "VDTQ_OUT_DIR";

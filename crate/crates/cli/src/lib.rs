//! File formats, configuration and command implementations of the
//! `irtrack` command-line tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod imageio;
pub mod pipeline;

pub use config::{RunConfig, Variant};
pub use error::{CliError, Result};

//! Command-line front end of the MIST experiment harness.
//!
//! [`config`] parses `key = value` run configurations, [`app`] implements
//! the `run`, `sweep`, `verify`, `pretrain` and `inspect-checkpoint`
//! subcommands, and [`output`] writes the result files.

pub mod app;
pub mod config;
pub mod error;
pub mod output;

pub use app::{execute, main_entry, verify, Outcome};
pub use config::{parse_config, parse_entries, RunConfig};
pub use error::CliError;

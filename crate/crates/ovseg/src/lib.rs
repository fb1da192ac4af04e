//! Files, formats and the command-line front end around `ovseg-core`.
//!
//! Exit statuses: 0 success, 1 missing or unreadable input, 2 invalid
//! configuration or arguments, 3 non-finite training loss, 4 checkpoint
//! that does not fit the configured model.

pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod images;
pub mod run_config;
pub mod tensor_io;

pub use error::{CliError, CliResult};

//! File formats, configuration, machine reports and command drivers behind
//! the `tate` binary.

pub mod commands;
pub mod config;
pub mod csv_io;
pub mod error;
pub mod report;
pub mod table;

pub use error::{CliError, Result};

//! Data IO, configuration, reports and the command-line workflow around
//! [`fairstg_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod report;
pub mod synth;

pub use error::{CliError, Result};

//! File formats, training runs and tooling around the `sbat-core` model.

pub mod bench;
pub mod cli;
pub mod config;
pub mod dump;
pub mod error;
pub mod io;
pub mod run;

pub use error::{CliError, Result};

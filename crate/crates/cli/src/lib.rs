//! Batch front-end for `toplora` experiments.
//!
//! Each subcommand reads its section of a strict JSON config, runs, and
//! returns a [`Report`] plus an exit status (0 ok, 1 threshold failure,
//! 2 usage/config/format error, 3 numeric failure).

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use commands::{execute, Command, Invocation, Outcome};
pub use config::ConfigFile;
pub use error::{CliError, Result};
pub use report::Report;

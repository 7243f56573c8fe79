use serde::Serialize;
use serde_json::Value;

use crate::error::Result;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything a subcommand emits. Only `wall_clock_seconds` varies between
/// identical invocations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub tool_version: &'static str,
    pub command: &'static str,
    pub config: Value,
    pub results: Value,
    pub wall_clock_seconds: f64,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self).map_err(std::io::Error::other)?)
    }

    /// Canonical bytes of the results payload, for reproducibility checks.
    pub fn payload_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.results).expect("JSON values always serialize")
    }
}

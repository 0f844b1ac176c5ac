use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::HarnessConfig;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// JSON report written by every CLI run. Apart from `wall_clock_seconds`,
/// the content is a pure function of the config and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub passed: bool,
    pub config: HarnessConfig,
    pub results: Value,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn new(command: &str, cfg: &HarnessConfig, passed: bool, results: impl Serialize) -> Result<Self> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            passed,
            config: cfg.clone(),
            results: serde_json::to_value(results).map_err(|e| Error::Numeric(format!("report: {e}")))?,
            wall_clock_seconds: 0.0,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("report: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    /// The report with timing removed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }
}

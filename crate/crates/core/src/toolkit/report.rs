//! Self-describing run reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toolkit::config::RunConfig;
use crate::toolkit::io::write_bytes;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub holds: bool,
    /// Asserted checks decide the exit status; the rest are observations.
    pub asserted: bool,
    #[serde(default)]
    pub detail: String,
}

impl Check {
    pub fn asserted(name: impl Into<String>, holds: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            holds,
            asserted: true,
            detail: detail.into(),
        }
    }

    pub fn observed(name: impl Into<String>, holds: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            holds,
            asserted: false,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    /// Content hashes of input bundles and image sets.
    pub inputs: BTreeMap<String, String>,
    pub metrics: serde_json::Value,
    pub checks: Vec<Check>,
    /// Wall-clock seconds per phase; excluded from replay comparison.
    pub timings: BTreeMap<String, f64>,
}

impl AnalysisReport {
    pub fn new(config: RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            inputs: BTreeMap::new(),
            metrics: serde_json::Value::Null,
            checks: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    /// True when every asserted check holds.
    pub fn all_hold(&self) -> bool {
        self.checks.iter().filter(|c| c.asserted).all(|c| c.holds)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Names of the fields in which `other` differs, ignoring timings and the
    /// output directory.
    pub fn differences(&self, other: &AnalysisReport) -> Vec<String> {
        let mut out = Vec::new();
        if self.config.command != other.config.command || self.config.precision != other.config.precision {
            out.push("config".to_string());
        }
        if self.inputs != other.inputs {
            out.push("inputs".to_string());
        }
        if self.checks != other.checks {
            out.push("checks".to_string());
        }
        diff_values("metrics", &self.metrics, &other.metrics, &mut out);
        out
    }
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for k in x.keys().chain(y.keys().filter(|k| !x.contains_key(*k))) {
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff_values(&format!("{path}.{k}"), u, v, out),
                    _ => out.push(format!("{path}.{k}")),
                }
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                diff_values(&format!("{path}[{i}]"), u, v, out);
            }
        }
        (Value::Number(x), Value::Number(y)) => {
            // compare bit patterns so that replay means bit-exact
            let same = match (x.as_f64(), y.as_f64()) {
                (Some(p), Some(q)) if x.is_f64() || y.is_f64() => p.to_bits() == q.to_bits(),
                _ => x == y,
            };
            if !same {
                out.push(path.to_string());
            }
        }
        _ if a == b => {}
        _ => out.push(path.to_string()),
    }
}

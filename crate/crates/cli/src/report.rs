//! Schema-versioned JSON reports.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const REPORT_SCHEMA: &str = "fracmet-report/1";

/// How a measured value is compared with its tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    /// Pass when `measured ≤ tolerance`.
    AtMost,
    /// Pass when `measured ≥ tolerance`.
    AtLeast,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub bound: Bound,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Check {
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        let passed = measured <= tolerance;
        Check { name: name.into(), measured, tolerance, bound: Bound::AtMost, passed, note: None }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        let passed = measured >= tolerance;
        Check { name: name.into(), measured, tolerance, bound: Bound::AtLeast, passed, note: None }
    }

    /// A check whose computation itself failed.
    pub fn failed(name: impl Into<String>, why: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            measured: f64::NAN,
            tolerance: f64::NAN,
            bound: Bound::AtMost,
            passed: false,
            note: Some(why.into()),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub subcommand: String,
    pub library_version: &'static str,
    /// `sha256:` of the config file bytes.
    pub config_hash: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    /// Subcommand-specific summary.
    pub summary: serde_json::Value,
}

pub fn config_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::from("sha256:");
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

impl Report {
    pub fn new(subcommand: &str, config_hash: String, seed: u64) -> Self {
        Report {
            schema: REPORT_SCHEMA,
            subcommand: subcommand.into(),
            library_version: fracmet_core::VERSION,
            config_hash,
            seed,
            passed: true,
            checks: Vec::new(),
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn push(&mut self, c: Check) {
        self.passed &= c.passed;
        self.checks.push(c);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One line per check, for the terminal.
    pub fn summary_lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                let op = match c.bound {
                    Bound::AtMost => "<=",
                    Bound::AtLeast => ">=",
                };
                let status = if c.passed { "PASS" } else { "FAIL" };
                let note = c.note.as_deref().map(|n| format!("  ({n})")).unwrap_or_default();
                format!("{status} {:<44} {:.3e} {op} {:.3e}{note}", c.name, c.measured, c.tolerance)
            })
            .collect()
    }
}

//! Runners behind the command-line harness. Each returns a serializable
//! report; the binary only parses flags and writes output.

pub mod bench;
pub mod locality;
pub mod needle;
pub mod verify;

use serde::Serialize;

/// Version of every JSON/CSV report layout emitted by the harness.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub tolerance: f64,
    pub observed: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CheckResult {
    /// Passes when `observed <= tolerance`.
    pub fn at_most(name: &str, tolerance: f64, observed: f64) -> Self {
        Self {
            name: name.to_string(),
            tolerance,
            observed,
            pass: observed <= tolerance,
            detail: None,
        }
    }

    /// Passes when `observed >= tolerance`.
    pub fn at_least(name: &str, tolerance: f64, observed: f64) -> Self {
        Self {
            pass: observed >= tolerance,
            ..Self::at_most(name, tolerance, observed)
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

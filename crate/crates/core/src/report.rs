//! Pass/fail verification reports.

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    /// The measured discrepancy (or statistic) for this check.
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} value={:.3e} bound={:.3e} {}",
            self.name,
            self.value,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub lines: Vec<CheckLine>,
}

impl Report {
    /// Adds a check that passes when `value < tolerance`.
    pub fn below(&mut self, name: impl Into<String>, value: f64, tolerance: f64) {
        self.lines.push(CheckLine {
            name: name.into(),
            value,
            tolerance,
            pass: value < tolerance,
        });
    }

    /// Adds a check with an externally decided outcome.
    pub fn check(&mut self, name: impl Into<String>, value: f64, tolerance: f64, pass: bool) {
        self.lines.push(CheckLine {
            name: name.into(),
            value,
            tolerance,
            pass,
        });
    }

    pub fn extend(&mut self, other: Report) {
        self.lines.extend(other.lines);
    }

    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }

    /// Pretty-printed JSON; non-finite values become `null`.
    pub fn to_json(&self) -> crate::Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn get(&self, name: &str) -> Option<&CheckLine> {
        self.lines.iter().find(|l| l.name == name)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

/// ‖a − b‖ / max(‖a‖, ‖b‖); zero when both vectors vanish.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

//! Structured reports and their plain-text renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use sectune_core::eval::{render_table, PromptVariant, SecurityResult, TableRow, UtilityResult};

/// Aggregate security of one prompt variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: PromptVariant,
    /// Mean secure rate in percent; absent when any scenario is undefined.
    pub security: Option<f64>,
    /// Scenarios that produced no valid program.
    pub undefined: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: String,
    pub checkpoint: String,
    pub seed: u64,
    pub n: usize,
    pub temperature: f64,
    pub results: Vec<SecurityResult>,
    pub aggregates: Vec<Aggregate>,
    pub utility: Option<UtilityResult>,
}

impl EvalReport {
    pub const KIND: &'static str = "eval";

    /// Security under `variant`, in percent.
    pub fn security(&self, variant: PromptVariant) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.variant == variant)
            .and_then(|a| a.security)
    }

    /// Utility probe pass@1, in percent.
    pub fn utility(&self) -> Option<f64> {
        self.utility.as_ref().map(|u| 100.0 * u.pass_at_1)
    }

    /// Scenario rows by variant columns, then the aggregate and utility.
    pub fn render(&self) -> String {
        let variants: Vec<PromptVariant> = self.aggregates.iter().map(|a| a.variant).collect();
        let mut ids: Vec<&str> = Vec::new();
        for r in &self.results {
            if !ids.contains(&r.scenario.as_str()) {
                ids.push(&r.scenario);
            }
        }
        let width = ids.iter().map(|s| s.len()).max().unwrap_or(0).max(8);
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.1}"));
        let mut s = format!("{:<width$}", "scenario");
        for v in &variants {
            let _ = write!(s, "  {:>12}", v.name());
        }
        s.push('\n');
        for id in &ids {
            let _ = write!(s, "{id:<width$}");
            for v in &variants {
                let rate = self
                    .results
                    .iter()
                    .find(|r| r.scenario == *id && r.variant == *v)
                    .and_then(|r| r.rate.map(|x| 100.0 * x));
                let _ = write!(s, "  {:>12}", pct(rate));
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<width$}", "overall");
        for a in &self.aggregates {
            let _ = write!(s, "  {:>12}", pct(a.security));
        }
        s.push('\n');
        if let Some(u) = self.utility() {
            let _ = writeln!(s, "utility pass@1: {u:.1}");
        }
        for a in &self.aggregates {
            if !a.undefined.is_empty() {
                let _ = writeln!(
                    s,
                    "{}: no valid program for {}",
                    a.variant.name(),
                    a.undefined.join(", ")
                );
            }
        }
        s
    }
}

/// One configuration's scores with the checkpoint they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub checkpoint: String,
    pub seed: u64,
    pub security: Option<f64>,
    pub utility: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub exponent: u32,
    pub kl_weight: f64,
    pub checkpoint: String,
    pub log: String,
    pub security: Option<f64>,
    pub utility: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: String,
    pub title: String,
    pub rows: Vec<ReportRow>,
    pub sweep: Vec<SweepPoint>,
    /// Least-squares slope of security against utility over the sweep.
    pub slope: Option<f64>,
}

impl ExperimentReport {
    pub const KIND: &'static str = "experiment";

    pub fn new(title: impl Into<String>) -> Self {
        ExperimentReport {
            kind: Self::KIND.into(),
            title: title.into(),
            rows: Vec::new(),
            sweep: Vec::new(),
            slope: None,
        }
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        if !self.rows.is_empty() {
            let rows: Vec<TableRow> = self
                .rows
                .iter()
                .map(|r| TableRow {
                    label: r.label.clone(),
                    security: r.security,
                    utility: r.utility,
                })
                .collect();
            s.push_str(&render_table(&self.title, &rows));
        }
        if !self.sweep.is_empty() {
            if !s.is_empty() {
                s.push('\n');
            }
            s.push_str(&render_curve(&self.sweep));
            match self.slope {
                Some(b) => {
                    let _ = writeln!(s, "slope d(security)/d(utility): {b:.3}");
                }
                None => s.push_str("slope d(security)/d(utility): n/a\n"),
            }
        }
        s
    }
}

/// Sweep points as a table with one bar per score (one `#` per 5 points).
pub fn render_curve(points: &[SweepPoint]) -> String {
    let bar = |v: Option<f64>| v.map_or(String::new(), |x| "#".repeat((x / 5.0).round() as usize));
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.1}"));
    let mut s = format!(
        "{:>7}  {:>8}  {:>8}  {:<20}  {}\n",
        "w_kl", "security", "utility", "security", "utility"
    );
    for p in points {
        let _ = writeln!(
            s,
            "{:>7.1}  {:>8}  {:>8}  {:<20}  {}",
            p.kl_weight,
            pct(p.security),
            pct(p.utility),
            bar(p.security),
            bar(p.utility)
        );
    }
    s
}

/// Slope of the least-squares line through `(x, y)`, if defined.
pub fn ls_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

//! Flat key-value metric reports.
//!
//! ```text
//! # procshift metric report
//! meta.dataset = 3f2a…
//! meta.map_excluded_queries = 0
//! meta.model = 9c41…
//! meta.seed = 7
//! eda = 91.250000
//! ...
//! ```
//!
//! Metric values use six fixed decimals; keys are sorted.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const REPORT_HEADER: &str = "# procshift metric report";

/// Metric keys written by the evaluation pipeline.
pub const REPORT_KEYS: [&str; 9] = [
    "eda",
    "edit",
    "f1@10",
    "f1@25",
    "f1@50",
    "frame_acc",
    "map@10",
    "phase_f1",
    "ranking_acc",
];

/// Metadata keys written by the evaluation pipeline.
pub const META_KEYS: [&str; 4] = ["dataset", "map_excluded_queries", "model", "seed"];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub meta: BTreeMap<String, String>,
}

fn check_value(key: &str, v: f64) -> std::result::Result<(), String> {
    if !v.is_finite() {
        return Err(format!("{key} is not finite"));
    }
    let range = if key.starts_with("map") { 1.0 } else { 100.0 };
    if !(0.0..=range).contains(&v) {
        return Err(format!("{key} = {v} outside [0, {range}]"));
    }
    Ok(())
}

impl MetricReport {
    pub fn insert(&mut self, key: &str, value: f64) -> Result<()> {
        check_value(key, value).map_err(Error::Schema)?;
        self.metrics.insert(key.to_string(), value);
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta.{k} = {v}");
        }
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k} = {v:.6}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<MetricReport> {
        let mut r = MetricReport::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |d: String| Error::Schema(format!("report line {}: {d}", i + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(bad("empty key".into()));
            }
            if let Some(m) = k.strip_prefix("meta.") {
                if r.meta.insert(m.to_string(), v.to_string()).is_some() {
                    return Err(bad(format!("duplicate key {k}")));
                }
            } else {
                let x: f64 = v.parse().map_err(|_| bad(format!("{k}: `{v}` is not a number")))?;
                check_value(k, x).map_err(bad)?;
                if r.metrics.insert(k.to_string(), x).is_some() {
                    return Err(bad(format!("duplicate key {k}")));
                }
            }
        }
        Ok(r)
    }

    /// True when the metric keys are exactly [`REPORT_KEYS`] and the
    /// metadata keys exactly [`META_KEYS`].
    pub fn has_standard_schema(&self) -> bool {
        self.metrics.keys().map(String::as_str).eq(REPORT_KEYS) && self.meta.keys().map(String::as_str).eq(META_KEYS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub key: String,
    pub a: f64,
    pub b: f64,
}

impl Delta {
    pub fn delta(&self) -> f64 {
        self.b - self.a
    }
}

/// Per-metric `b − a`. Reports must carry the same metric keys.
pub fn compare(a: &MetricReport, b: &MetricReport) -> Result<Vec<Delta>> {
    let only_a: Vec<&str> = a
        .metrics
        .keys()
        .filter(|k| !b.metrics.contains_key(*k))
        .map(String::as_str)
        .collect();
    let only_b: Vec<&str> = b
        .metrics
        .keys()
        .filter(|k| !a.metrics.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(Error::Schema(format!(
            "report keys differ: missing from B [{}], missing from A [{}]",
            only_a.join(", "),
            only_b.join(", ")
        )));
    }
    Ok(a.metrics
        .iter()
        .map(|(k, &x)| Delta {
            key: k.clone(),
            a: x,
            b: b.metrics[k],
        })
        .collect())
}

pub fn delta_table(deltas: &[Delta]) -> String {
    let mut s = format!("{:<12} {:>12} {:>12} {:>12}\n", "metric", "A", "B", "B-A");
    for d in deltas {
        let _ = writeln!(s, "{:<12} {:>12.6} {:>12.6} {:>12.6}", d.key, d.a, d.b, d.delta());
    }
    s
}

//! CSV and JSON writers.

use std::fs;
use std::path::Path;

/// Shortest decimal that parses back to the same float. Positional notation
/// in the usual range, exponent form outside it.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Long-format metrics: one `(step, metric, value)` row each, where `step`
/// is the iteration or trial index.
#[derive(Debug, Default)]
pub struct Metrics {
    rows: Vec<(usize, String, f64)>,
}

impl Metrics {
    pub fn push(&mut self, step: usize, metric: impl Into<String>, value: f64) {
        self.rows.push((step, metric.into(), value));
    }

    pub fn extend_means(&mut self, step: usize, prefix: &str, values: &[f64]) {
        for (k, v) in values.iter().enumerate() {
            self.push(step, format!("{prefix}_{k}"), *v);
        }
    }
}

/// Wide numeric table with a header row.
#[derive(Debug)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn coords(dim: usize) -> Vec<String> {
        (0..dim).map(|k| format!("x{k}")).collect()
    }
}

pub fn write_metrics(path: &Path, m: &Metrics) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "metric", "value"])?;
    for (step, name, value) in &m.rows {
        w.write_record([step.to_string(), name.clone(), fmt_f64(*value)])?;
    }
    w.flush()
}

pub fn write_table(path: &Path, t: &Table) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&t.header)?;
    for row in &t.rows {
        w.write_record(row.iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush()
}

/// Arbitrary records with a header, all fields already formatted.
pub fn write_records(path: &Path, header: &[&str], rows: &[Vec<String>]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()
}

pub fn write_json(path: &Path, v: &serde_json::Value) -> std::io::Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(std::io::Error::other)?;
    s.push('\n');
    fs::write(path, s)
}

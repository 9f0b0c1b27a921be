//! Plain-text summaries of a run manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;
use std::path::Path;

use super::manifest::RunManifest;

/// Splits a metric key at its first `/` into (method, metric). Keys without
/// a slash belong to the method "-".
pub fn split_key(key: &str) -> (&str, &str) {
    key.split_once('/').unwrap_or(("-", key))
}

fn row(cells: &[String], widths: &[usize]) -> String {
    let padded: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
    padded.join(" | ").trim_end().to_string()
}

/// The methods × metrics table alone, values at 4 decimals.
pub fn metrics_table(metrics: &BTreeMap<String, f64>) -> String {
    let mut cols = BTreeSet::new();
    let mut cells: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for (k, v) in metrics {
        let (m, c) = split_key(k);
        cols.insert(c);
        cells.entry(m).or_default().insert(c, *v);
    }
    let mut header = vec!["method".to_string()];
    header.extend(cols.iter().map(|c| c.to_string()));
    let body: Vec<Vec<String>> = cells
        .iter()
        .map(|(m, vals)| {
            let mut r = vec![m.to_string()];
            r.extend(cols.iter().map(|c| vals.get(c).map_or("-".into(), |v| format!("{v:.4}"))));
            r
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = row(&header, &widths) + "\n";
    out += &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-");
    out += "\n";
    for r in &body {
        out += &row(r, &widths);
        out += "\n";
    }
    out
}

/// Full report: run header, metrics table and the file inventory with each
/// file's status under `base`.
pub fn emit_report(manifest: &RunManifest, base: &Path) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "kind: {}", manifest.kind);
    let _ = writeln!(out, "status: {}", manifest.status);
    if let Some(e) = &manifest.error {
        let _ = writeln!(out, "error: {e}");
    }
    let _ = writeln!(out, "version: {}\n", manifest.artifact_version);
    out += &metrics_table(&manifest.metrics);
    out += "\nfiles:\n";
    for (path, status) in manifest.check_files(base) {
        let _ = writeln!(out, "  {path}  [{}]", status.label());
    }
    out
}

//! Comparison tables over run directories.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use aczsl::MetricsReport;

/// Column titles, in display order.
pub const COLUMNS: [&str; 4] = ["mSA", "mUA(ZSL)", "mH", "mOA(GZSL)"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub name: String,
    pub replicates: usize,
    /// One entry per [`COLUMNS`] item.
    pub stats: [Option<Stat>; 4],
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).with_context(|| format!("missing metrics file {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("corrupt metrics file {}", path.display()))
}

/// Metrics under `dir`: its own `metrics.json`, or one per immediate
/// subdirectory that has one (sorted by name).
pub fn collect(dir: &Path) -> Result<Vec<MetricsReport>> {
    let own = dir.join("metrics.json");
    if own.exists() {
        return Ok(vec![read_metrics(&own)?]);
    }
    let entries = fs::read_dir(dir).with_context(|| format!("reading run directory {}", dir.display()))?;
    let mut subdirs: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.json").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        bail!(
            "missing metrics file: no metrics.json in {} or its subdirectories",
            dir.display()
        );
    }
    subdirs.iter().map(|p| read_metrics(&p.join("metrics.json"))).collect()
}

pub fn summarize(name: &str, reports: &[MetricsReport]) -> Row {
    let column = |f: fn(&MetricsReport) -> Option<f64>| Stat::of(&reports.iter().filter_map(f).collect::<Vec<_>>());
    Row {
        name: name.to_string(),
        replicates: reports.len(),
        stats: [
            column(|r| Some(r.msa)),
            column(|r| r.mua),
            column(|r| r.mh),
            column(|r| Some(r.moa)),
        ],
    }
}

pub fn rows_for(dirs: &[impl AsRef<Path>]) -> Result<Vec<Row>> {
    dirs.iter()
        .map(|d| {
            let d = d.as_ref();
            Ok(summarize(&d.display().to_string(), &collect(d)?))
        })
        .collect()
}

fn cell(s: &Option<Stat>) -> String {
    match s {
        Some(s) => format!("{:.4} ± {:.4}", s.mean, s.std),
        None => "-".into(),
    }
}

/// Aligned plain-text table.
pub fn render_table(rows: &[Row]) -> String {
    let mut header = vec!["run".to_string(), "n".to_string()];
    header.extend(COLUMNS.iter().map(|c| c.to_string()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.name.clone(), r.replicates.to_string()];
            v.extend(r.stats.iter().map(cell));
            v
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            std::iter::once(&header)
                .chain(&body)
                .map(|row| row[i].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&body) {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| {
                let pad = w - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

pub fn render_csv(rows: &[Row]) -> String {
    let mut out = String::from("run,n");
    for c in ["mSA", "mUA", "mH", "mOA"] {
        let _ = write!(out, ",{c}_mean,{c}_std");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{}", r.name, r.replicates);
        for s in &r.stats {
            match s {
                Some(s) => {
                    let _ = write!(out, ",{:.6},{:.6}", s.mean, s.std);
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

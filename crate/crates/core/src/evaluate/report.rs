//! Report structure and its JSON / CSV / SVG renderings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::mean_std;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub k: usize,
    pub seed: u64,
    /// `None` when the cell failed.
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub k: usize,
    pub mean: Option<f64>,
    /// Population standard deviation over the completed seeds.
    pub std: Option<f64>,
    pub completed: usize,
    pub missing: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub recipe: String,
    pub domain: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub cells: Vec<Cell>,
    pub summary: Vec<Summary>,
}

/// SHA-256 of the compact JSON encoding.
pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

/// Per-K aggregates in ascending K order.
pub fn summarize(cells: &[Cell]) -> Vec<Summary> {
    let mut ks: Vec<usize> = cells.iter().map(|c| c.k).collect();
    ks.sort_unstable();
    ks.dedup();
    ks.into_iter()
        .map(|k| {
            let scores: Vec<f64> = cells.iter().filter(|c| c.k == k).filter_map(|c| c.f1).collect();
            let total = cells.iter().filter(|c| c.k == k).count();
            let stats = mean_std(&scores);
            Summary {
                k,
                mean: stats.map(|s| s.0),
                std: stats.map(|s| s.1),
                completed: scores.len(),
                missing: total - scores.len(),
            }
        })
        .collect()
}

impl EvaluationReport {
    pub fn new(recipe: &str, domain: &str, config: serde_json::Value, cells: Vec<Cell>) -> Self {
        Self {
            recipe: recipe.to_string(),
            domain: domain.to_string(),
            config_hash: config_hash(&config),
            config,
            summary: summarize(&cells),
            cells,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("report", e))
    }

    /// `k,seed,macro_f1` with an empty score for failed cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,seed,macro_f1\n");
        for c in &self.cells {
            let f1 = c.f1.map(|f| f.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", c.k, c.seed, f1);
        }
        out
    }

    /// Mean macro-F1 against K (log-2 axis) with ±σ bars.
    pub fn to_svg(&self) -> String {
        let (w, h, margin) = (480.0, 320.0, 50.0);
        let points: Vec<(usize, f64, f64)> = self
            .summary
            .iter()
            .filter_map(|s| Some((s.k, s.mean?, s.std.unwrap_or(0.0))))
            .collect();
        let ks: Vec<f64> = self.summary.iter().map(|s| (s.k.max(1) as f64).log2()).collect();
        let (lo, hi) = ks
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let x = |k: usize| margin + ((k.max(1) as f64).log2() - lo) / span * (w - 2.0 * margin);
        let y = |f: f64| h - margin - f.clamp(0.0, 1.0) * (h - 2.0 * margin);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{} / {}</text>"#,
            w / 2.0,
            escape(&self.domain),
            escape(&self.recipe)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{margin}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
            h - margin,
            w - margin,
            h - margin
        );
        let _ = writeln!(
            s,
            r#"<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{}" stroke="black"/>"#,
            h - margin
        );
        for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{tick:.2}</text>"#,
                margin - 6.0,
                y(tick) + 3.0
            );
        }
        for sm in &self.summary {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
                x(sm.k),
                h - margin + 14.0,
                sm.k
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">K</text>"#,
            w / 2.0,
            h - 12.0
        );
        if !points.is_empty() {
            let path: Vec<String> = points
                .iter()
                .map(|&(k, m, _)| format!("{:.2},{:.2}", x(k), y(m)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
                path.join(" ")
            );
        }
        for &(k, m, sd) in &points {
            let (px, top, bottom) = (x(k), y(m + sd), y(m - sd));
            let _ = writeln!(
                s,
                r#"<line x1="{px:.2}" y1="{top:.2}" x2="{px:.2}" y2="{bottom:.2}" stroke="steelblue"/>"#
            );
            for cap in [top, bottom] {
                let _ = writeln!(
                    s,
                    r#"<line x1="{:.2}" y1="{cap:.2}" x2="{:.2}" y2="{cap:.2}" stroke="steelblue"/>"#,
                    px - 4.0,
                    px + 4.0
                );
            }
            let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, y(m));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn file_stem(report: &EvaluationReport) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    };
    format!("{}_{}", clean(&report.domain), clean(&report.recipe))
}

/// Paths written by [`emit_report`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub plot: PathBuf,
    /// Wall-clock metadata, kept apart so the report itself is reproducible.
    pub run_info: PathBuf,
}

/// Writes `{domain}_{recipe}.json`, `.csv`, `.svg` and `.run.json` into `out_dir`.
pub fn emit_report(report: &EvaluationReport, out_dir: &Path) -> Result<ReportFiles> {
    if report.cells.is_empty() {
        return Err(Error::InvalidArgument("report has no cells".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = file_stem(report);
    let files = ReportFiles {
        json: out_dir.join(format!("{stem}.json")),
        csv: out_dir.join(format!("{stem}.csv")),
        plot: out_dir.join(format!("{stem}.svg")),
        run_info: out_dir.join(format!("{stem}.run.json")),
    };
    let write = |p: &Path, body: String| fs::write(p, body).map_err(|e| Error::io(p, e));
    write(&files.json, report.to_json()?)?;
    write(&files.csv, report.to_csv())?;
    write(&files.plot, report.to_svg())?;
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let info = serde_json::json!({
        "written_at_unix": secs,
        "config_hash": report.config_hash,
        "crate_version": env!("CARGO_PKG_VERSION"),
    });
    write(&files.run_info, info.to_string())?;
    Ok(files)
}

pub fn load_report(path: &Path) -> Result<EvaluationReport> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| Error::json(path.display().to_string(), e))
}

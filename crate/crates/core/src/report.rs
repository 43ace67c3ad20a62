//! CSV tables and SVG charts built from run records.
//!
//! All outputs are rendered in memory and written through temporary files
//! that are renamed only once every file is complete.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::record::{mean_sd, Event, RunRecord};

pub const RESULTS_CSV: &str = "results.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const ACCURACY_SVG: &str = "accuracy.svg";
pub const SPARSITY_SVG: &str = "sparsity.svg";

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub experiment: String,
    pub seed: u64,
    pub run_id: String,
    pub config_hash: String,
    pub after_task: usize,
    pub task: usize,
    pub accuracy: f64,
}

/// One row of `aggregate.csv`: statistics across runs of one method.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub experiment: String,
    pub after_task: usize,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
    pub mean_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub results: Vec<ResultRow>,
    pub aggregate: Vec<AggregateRow>,
    pub accuracy_svg: String,
    pub sparsity_svg: String,
}

fn result_rows(rec: &RunRecord) -> Vec<ResultRow> {
    let h = rec.header();
    rec.events()
        .filter_map(|e| match e {
            Event::Evaluation {
                after_task,
                task,
                accuracy,
            } => Some(ResultRow {
                method: h.mode.clone(),
                experiment: h.experiment.clone(),
                seed: h.seed,
                run_id: h.run_id.clone(),
                config_hash: h.config_hash.clone(),
                after_task: *after_task,
                task: *task,
                accuracy: *accuracy,
            }),
            _ => None,
        })
        .collect()
}

/// Sparsity reported when each task completed, by task id.
fn sparsity_by_task(rec: &RunRecord) -> BTreeMap<usize, f64> {
    rec.events()
        .filter_map(|e| match e {
            Event::TaskCompleted { task, sparsity, .. } => Some((*task, *sparsity)),
            _ => None,
        })
        .collect()
}

/// Builds the report without touching the file system.
pub fn build_report(records: &[RunRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Input("no run records to report".into()));
    }
    let mut results = Vec::new();
    // (method, experiment) -> after_task -> per-run (avg accuracy, sparsity)
    let mut groups: BTreeMap<(String, String), BTreeMap<usize, Vec<(f64, Option<f64>)>>> = BTreeMap::new();
    for rec in records {
        let rows = result_rows(rec);
        if rows.is_empty() {
            return Err(Error::IncompleteRecord(format!(
                "run {} has no task evaluations",
                rec.header().run_id
            )));
        }
        let sparsity = sparsity_by_task(rec);
        let mut by_after: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in &rows {
            by_after.entry(r.after_task).or_default().push(r.accuracy);
        }
        let key = (rec.header().mode.clone(), rec.header().experiment.clone());
        let group = groups.entry(key).or_default();
        for (after, accs) in by_after {
            let avg = accs.iter().sum::<f64>() / accs.len() as f64;
            let sp = sparsity.range(..=after).next_back().map(|(_, &s)| s);
            group.entry(after).or_default().push((avg, sp));
        }
        results.extend(rows);
    }
    let mut aggregate = Vec::new();
    for ((method, experiment), by_after) in &groups {
        for (&after_task, runs) in by_after {
            let accs: Vec<f64> = runs.iter().map(|r| r.0).collect();
            let (mean_accuracy, sd_accuracy) = mean_sd(&accs)?;
            let sps: Vec<f64> = runs.iter().filter_map(|r| r.1).collect();
            let mean_sparsity = if sps.is_empty() {
                f64::NAN
            } else {
                sps.iter().sum::<f64>() / sps.len() as f64
            };
            aggregate.push(AggregateRow {
                method: method.clone(),
                experiment: experiment.clone(),
                after_task,
                runs: runs.len(),
                mean_accuracy,
                sd_accuracy,
                mean_sparsity,
            });
        }
    }
    let hashes: Vec<String> = {
        let mut h: Vec<String> = records.iter().map(|r| r.header().config_hash.clone()).collect();
        h.sort();
        h.dedup();
        h
    };
    let series = |f: fn(&AggregateRow) -> f64| -> Vec<(String, Vec<(f64, f64)>)> {
        let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for row in &aggregate {
            let y = f(row);
            if y.is_finite() {
                out.entry(format!("{} / {}", row.experiment, row.method))
                    .or_default()
                    .push(((row.after_task + 1) as f64, y));
            }
        }
        out.into_iter().collect()
    };
    let accuracy_svg = line_chart("Average accuracy after each task", "average accuracy", &series(|r| r.mean_accuracy), &hashes);
    let sparsity_svg = line_chart("Sparsity after each task", "sparsity", &series(|r| r.mean_sparsity), &hashes);
    Ok(Report {
        results,
        aggregate,
        accuracy_svg,
        sparsity_svg,
    })
}

fn to_csv<T: serde::Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Writes the CSV and SVG files into `dir`; returns their paths.
pub fn emit_report(records: &[RunRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    let report = build_report(records)?;
    let files = [
        (RESULTS_CSV, to_csv(&report.results)?),
        (AGGREGATE_CSV, to_csv(&report.aggregate)?),
        (ACCURACY_SVG, report.accuracy_svg),
        (SPARSITY_SVG, report.sparsity_svg),
    ];
    fs::create_dir_all(dir)?;
    let mut staged = Vec::new();
    let outcome = (|| -> Result<()> {
        for (name, body) in &files {
            let tmp = dir.join(format!(".{name}.tmp"));
            staged.push(tmp.clone());
            fs::write(&tmp, body)?;
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        for tmp in &staged {
            let _ = fs::remove_file(tmp);
        }
        return Err(e);
    }
    let mut out = Vec::new();
    for ((name, _), tmp) in files.iter().zip(&staged) {
        let dst = dir.join(name);
        fs::rename(tmp, &dst)?;
        out.push(dst);
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A minimal line chart with one polyline per series.
fn line_chart(title: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)], hashes: &[String]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 180.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    let pad = ((y_max - y_min) * 0.1).max(0.005);
    let (y_lo, y_hi) = ((y_min - pad).max(0.0), (y_max + pad).min(1.0).max(y_min + pad));
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + if x_max > 1.0 { (x - 1.0) / (x_max - 1.0) * pw } else { pw / 2.0 };
    let sy = |y: f64| top + (1.0 - (y - y_lo) / (y_hi - y_lo)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, "<title>{}</title>", escape(title));
    let _ = writeln!(s, "<desc>config hashes: {}</desc>", escape(&hashes.join(", ")));
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-size="15">{}</text>"#, left, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    for i in 0..=4 {
        let y = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            left - 6.0,
            sy(y) + 4.0,
            y
        );
    }
    for t in 1..=(x_max as usize) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{t}</text>"#,
            sx(t as f64),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">tasks learned</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for &(x, y) in points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            left + pw + 12.0,
            left + pw + 32.0,
            left + pw + 38.0,
            ly + 4.0,
            escape(name)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="{}" font-size="9" fill="gray">config {}</text>"#,
        h - 26.0,
        escape(&hashes.join(" "))
    );
    s.push_str("</svg>\n");
    s
}

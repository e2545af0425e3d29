//! Report bundle: manifest, learning curves, summary tables and plots.
//!
//! Everything under the bundle directory except `timings.csv` is a pure
//! function of the configuration and seeds. `render_reports` rebuilds the
//! summaries and plots from `manifest.json` and `curves/` alone.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::RewardRegime;
use crate::error::{Error, Result};
use crate::train::{Method, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub name: String,
    pub env: String,
    pub regime: RewardRegime,
    /// SHA-256 of the binary `.traj` encoding.
    pub sha256: String,
    pub trajectories: usize,
    pub transitions: usize,
    pub successes: Option<usize>,
    /// What the score column means: "normalized", "success_rate" or "return".
    pub metric: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub id: String,
    pub dataset: String,
    pub method: Method,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub train: TrainConfig,
    pub param_count: Option<usize>,
    pub steps: Option<u64>,
    pub train_trajectories: Option<usize>,
    pub train_transitions: Option<usize>,
    pub rtg_target: Option<f64>,
    pub final_score: Option<f64>,
    pub best_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config: ExperimentConfig,
    pub datasets: Vec<DatasetRecord>,
    pub arms: Vec<ArmRecord>,
}

/// Seed-aggregated evaluation point. `best` is the running maximum of
/// `mean` up to and including this point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub mean: f64,
    pub std: f64,
    pub best: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub dataset: String,
    pub method: Method,
    pub points: Vec<CurvePoint>,
}

impl Curve {
    pub fn file_name(&self) -> String {
        format!("{}__{}.csv", self.dataset, self.method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean,std,best,seeds\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{},{},{}", p.epoch, p.mean, p.std, p.best, p.seeds);
        }
        out
    }

    pub fn from_csv(dataset: &str, method: Method, text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Format {
            location: format!("curve {dataset}__{method}, line {line}"),
            message: msg.to_owned(),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "epoch,mean,std,best,seeds")) => {}
            _ => return Err(bad(1, "missing header")),
        }
        let mut points = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(i + 1, "expected 5 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
            points.push(CurvePoint {
                epoch: f[0].parse().map_err(|_| bad(i + 1, "bad epoch"))?,
                mean: num(f[1])?,
                std: num(f[2])?,
                best: num(f[3])?,
                seeds: f[4].parse().map_err(|_| bad(i + 1, "bad seed count"))?,
            });
        }
        Ok(Self {
            dataset: dataset.to_owned(),
            method,
            points,
        })
    }

    /// Builds the curve from per-seed `(epoch, score)` sequences. Point `j`
    /// aggregates the `j`-th evaluation of every seed that has one.
    pub fn aggregate(dataset: &str, method: Method, seeds: &[Vec<(usize, f64)>]) -> Self {
        let n = seeds.iter().map(Vec::len).max().unwrap_or(0);
        let mut points = Vec::with_capacity(n);
        let mut best = f64::NEG_INFINITY;
        for j in 0..n {
            let vals: Vec<f64> = seeds.iter().filter_map(|s| s.get(j).map(|p| p.1)).collect();
            let epoch = seeds.iter().find_map(|s| s.get(j).map(|p| p.0)).expect("some seed has point j");
            let mean = super::stats::mean(&vals);
            best = best.max(mean);
            points.push(CurvePoint {
                epoch,
                mean,
                std: super::stats::std(&vals),
                best,
                seeds: vals.len(),
            });
        }
        Self {
            dataset: dataset.to_owned(),
            method,
            points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub manifest: Manifest,
    pub curves: Vec<Curve>,
}

/// One summary table entry: the best seed-mean score over the run.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryCell {
    pub dataset: String,
    pub method: Method,
    pub value: Option<f64>,
    /// Seed standard deviation at the best point.
    pub std: Option<f64>,
    pub seeds: usize,
    pub failed: usize,
    pub is_best: bool,
}

fn precision(metric: &str) -> usize {
    if metric == "success_rate" {
        3
    } else {
        2
    }
}

impl Bundle {
    pub fn curve(&self, dataset: &str, method: Method) -> Option<&Curve> {
        self.curves.iter().find(|c| c.dataset == dataset && c.method == method)
    }

    /// Cells in dataset-major, method-minor order. Within a dataset every
    /// cell whose value equals the maximum at display precision is marked.
    pub fn summary(&self) -> Vec<SummaryCell> {
        let m = &self.manifest;
        let mut cells = Vec::new();
        for d in &m.datasets {
            let prec = precision(&d.metric);
            let mut row: Vec<SummaryCell> = m
                .config
                .methods
                .iter()
                .map(|&method| {
                    let arms = m.arms.iter().filter(|a| a.dataset == d.name && a.method == method);
                    let failed = arms.clone().filter(|a| !a.ok).count();
                    let seeds = arms.filter(|a| a.ok).count();
                    let peak = self.curve(&d.name, method).and_then(|c| {
                        c.points.iter().fold(None::<&CurvePoint>, |acc, p| match acc {
                            Some(b) if b.mean >= p.mean => Some(b),
                            _ => Some(p),
                        })
                    });
                    SummaryCell {
                        dataset: d.name.clone(),
                        method,
                        value: peak.map(|p| p.mean),
                        std: peak.map(|p| p.std),
                        seeds,
                        failed,
                        is_best: false,
                    }
                })
                .collect();
            let shown: Vec<Option<String>> = row.iter().map(|c| c.value.map(|v| format!("{v:.prec$}"))).collect();
            let top = row
                .iter()
                .filter_map(|c| c.value)
                .fold(None::<f64>, |a, v| Some(a.map_or(v, |a| a.max(v))))
                .map(|v| format!("{v:.prec$}"));
            for (c, s) in row.iter_mut().zip(&shown) {
                c.is_best = top.is_some() && *s == top;
            }
            cells.extend(row);
        }
        cells
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json`, `curves/` and the rendered reports.
pub fn write_bundle(dir: &Path, bundle: &Bundle) -> Result<()> {
    let manifest = serde_json::to_string_pretty(&bundle.manifest).expect("manifest serializes");
    write(&dir.join("manifest.json"), manifest + "\n")?;
    for c in &bundle.curves {
        write(&dir.join("curves").join(c.file_name()), c.to_csv())?;
    }
    render_reports(dir, bundle)
}

pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut curves = Vec::new();
    for d in &manifest.datasets {
        for &method in &manifest.config.methods {
            let path = dir.join("curves").join(format!("{}__{}.csv", d.name, method));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            curves.push(Curve::from_csv(&d.name, method, &text)?);
        }
    }
    Ok(Bundle { manifest, curves })
}

/// Writes `summary.{csv,txt,md}` and `plots/<dataset>.svg`.
pub fn render_reports(dir: &Path, bundle: &Bundle) -> Result<()> {
    let cells = bundle.summary();
    write(&dir.join("summary.csv"), summary_csv(&cells))?;
    write(&dir.join("summary.txt"), summary_table(bundle, &cells, false))?;
    write(&dir.join("summary.md"), summary_table(bundle, &cells, true))?;
    for d in &bundle.manifest.datasets {
        let curves: Vec<&Curve> = bundle.curves.iter().filter(|c| c.dataset == d.name).collect();
        write(&dir.join("plots").join(format!("{}.svg", d.name)), plot_svg(&d.name, &d.metric, &curves))?;
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn summary_csv(cells: &[SummaryCell]) -> String {
    let mut out = String::from("dataset,method,best_mean,std,seeds,failed,is_best\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.dataset,
            c.method,
            opt(c.value),
            opt(c.std),
            c.seeds,
            c.failed,
            c.is_best
        );
    }
    out
}

fn summary_table(bundle: &Bundle, cells: &[SummaryCell], markdown: bool) -> String {
    let m = &bundle.manifest;
    let methods = &m.config.methods;
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["dataset".to_owned(), "metric".to_owned()];
    header.extend(methods.iter().map(|x| x.label().to_owned()));
    rows.push(header);
    let mut notes = Vec::new();
    for d in &m.datasets {
        let prec = precision(&d.metric);
        let mut row = vec![d.name.clone(), d.metric.clone()];
        for c in cells.iter().filter(|c| c.dataset == d.name) {
            let mut s = match (c.value, c.std) {
                (Some(v), Some(sd)) => format!("{v:.prec$} ± {sd:.prec$}"),
                _ => "n/a".to_owned(),
            };
            if c.is_best {
                s = if markdown { format!("**{s}**") } else { format!("{s} *") };
            }
            if c.seeds == 1 {
                s.push_str(" (1 seed)");
            }
            if c.failed > 0 {
                notes.push(format!("{} / {}: {} seed(s) failed", d.name, c.method.label(), c.failed));
            }
            row.push(s);
        }
        rows.push(row);
    }
    let mut out = String::new();
    if markdown {
        let _ = writeln!(out, "# {}\n", m.name);
        for (i, r) in rows.iter().enumerate() {
            let _ = writeln!(out, "| {} |", r.join(" | "));
            if i == 0 {
                let _ = writeln!(out, "|{}", "---|".repeat(r.len()));
            }
        }
        out.push_str("\nBold marks the best method per dataset (ties at display precision are all marked).\n");
    } else {
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let _ = writeln!(out, "{}\n", m.name);
        for r in &rows {
            let cols: Vec<String> = r.iter().zip(&widths).map(|(s, &w)| format!("{s:<w$}")).collect();
            let _ = writeln!(out, "{}", cols.join("  ").trim_end());
        }
        out.push_str("\n* best method per dataset (ties at display precision are all marked)\n");
    }
    out.push_str("Values are the best seed-mean score over evaluation points ± seed std at that point.\n");
    for n in notes {
        let _ = writeln!(out, "{n}");
    }
    out
}

const COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];

fn method_color(m: Method) -> &'static str {
    COLORS[Method::ALL.iter().position(|&x| x == m).expect("known method")]
}

fn plot_svg(title: &str, metric: &str, curves: &[&Curve]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 120.0, 30.0, 40.0);
    let pts = curves.iter().flat_map(|c| c.points.iter());
    let x_max = pts.clone().map(|p| p.epoch).max().unwrap_or(1).max(1) as f64;
    let mut y_lo = pts.clone().map(|p| p.mean - p.std).fold(f64::INFINITY, f64::min);
    let mut y_hi = pts.map(|p| p.mean + p.std).fold(f64::NEG_INFINITY, f64::max);
    if !y_lo.is_finite() {
        (y_lo, y_hi) = (0.0, 1.0);
    }
    if y_hi - y_lo < 1e-9 {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    let px = |e: f64| left + (w - left - right) * e / x_max;
    let py = |v: f64| top + (h - top - bottom) * (y_hi - v) / (y_hi - y_lo);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, w / 2.0);
    let (x0, x1, y0, y1) = (px(0.0), px(x_max), py(y_lo), py(y_hi));
    let _ = writeln!(s, r#"<path d="M{x0:.1},{y1:.1} L{x0:.1},{y0:.1} L{x1:.1},{y0:.1}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let v = y_lo + (y_hi - y_lo) * f64::from(i) / 4.0;
        let e = x_max * f64::from(i) / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, x0 - 4.0, py(v) + 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{e:.0}</text>"#, px(e), y0 + 14.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">epoch</text>"#, (x0 + x1) / 2.0, h - 6.0);
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{metric}</text>"#, (y0 + y1) / 2.0, (y0 + y1) / 2.0);
    for (k, c) in curves.iter().enumerate() {
        let color = method_color(c.method);
        if !c.points.is_empty() {
            let upper = c.points.iter().map(|p| format!("{:.1},{:.1}", px(p.epoch as f64), py(p.mean + p.std)));
            let lower = c.points.iter().rev().map(|p| format!("{:.1},{:.1}", px(p.epoch as f64), py(p.mean - p.std)));
            let band: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, band.join(" "));
            let line: Vec<String> = c.points.iter().map(|p| format!("{:.1},{:.1}", px(p.epoch as f64), py(p.mean))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
            for p in &c.points {
                let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#, px(p.epoch as f64), py(p.mean));
            }
        }
        let ly = top + 16.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="12" height="4" fill="{color}"/>"#, w - right + 12.0, ly + 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, w - right + 30.0, ly + 9.0, c.method.label());
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_tracks_running_max() {
        let seeds = vec![vec![(1, 1.0), (2, 3.0), (3, 0.0)], vec![(1, 3.0), (2, 1.0), (3, 2.0)]];
        let c = Curve::aggregate("d", Method::Bc, &seeds);
        let means: Vec<f64> = c.points.iter().map(|p| p.mean).collect();
        let best: Vec<f64> = c.points.iter().map(|p| p.best).collect();
        assert_eq!(means, [2.0, 2.0, 1.0]);
        assert_eq!(best, [2.0, 2.0, 2.0]);
        assert_eq!(c.points[0].std, 1.0);
        let back = Curve::from_csv("d", Method::Bc, &c.to_csv()).unwrap();
        assert_eq!(back, c);
    }
}

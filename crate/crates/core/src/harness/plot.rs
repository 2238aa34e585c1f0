//! Learning-curve CSV and SVG output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use super::experiment::ExperimentSpec;
use super::summary::read_metrics;
use crate::error::{DpfrlError, Result};
use crate::trainer::{Metrics, METRICS_FILE};

pub const CURVES_CSV: &str = "curves.csv";
pub const CURVES_SVG: &str = "curves.svg";

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 190.0;
const MARGIN_Y: f64 = 40.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// A named learning curve read from one run directory.
#[derive(Debug, Clone)]
pub struct Curve {
    pub name: String,
    pub dir: PathBuf,
    pub metrics: Vec<Metrics>,
}

/// Run directories under `root` (including `root` itself) that hold a
/// metrics log, sorted by path.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            DpfrlError::io(path, e.into())
        })?;
        if entry.file_type().is_dir() && entry.path().join(METRICS_FILE).is_file() {
            found.push(entry.into_path());
        }
    }
    Ok(found)
}

pub fn load_curves(root: &Path) -> Result<Vec<Curve>> {
    let dirs = find_runs(root)?;
    if dirs.is_empty() {
        return Err(DpfrlError::NoMetrics(root.to_path_buf()));
    }
    dirs.into_iter()
        .map(|dir| {
            let name = dir
                .strip_prefix(root)
                .ok()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(&dir)
                .display()
                .to_string();
            load_curve(name, dir)
        })
        .collect()
}

fn load_curve(name: String, dir: PathBuf) -> Result<Curve> {
    let metrics = read_metrics(&dir.join(METRICS_FILE))?;
    Ok(Curve { name, dir, metrics })
}

/// Long-format CSV, one row per metrics record.
pub fn curves_csv(curves: &[Curve]) -> String {
    let mut s = String::from("run,update,step,episodes,mean_return\n");
    for c in curves {
        for m in &c.metrics {
            let r = m.mean_return.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{r}", c.name, m.update, m.step, m.episodes);
        }
    }
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Evenly spaced round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(f64::EPSILON);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * span {
        out.push(if t.abs() < 1e-12 * span { 0.0 } else { t });
        t += step;
    }
    out
}

/// Mean return against env steps, one polyline per curve.
pub fn curves_svg(title: &str, curves: &[Curve]) -> String {
    let points: Vec<(f64, f64)> = curves
        .iter()
        .flat_map(|c| &c.metrics)
        .filter_map(|m| m.mean_return.map(|r| (m.step as f64, r)))
        .collect();
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (0.0f64, 1.0f64, -1.0f64, 1.0f64);
    if !points.is_empty() {
        x_hi = points.iter().map(|p| p.0).fold(f64::MIN, f64::max).max(1.0);
        y_lo = points.iter().map(|p| p.1).fold(f64::MAX, f64::min);
        y_hi = points.iter().map(|p| p.1).fold(f64::MIN, f64::max);
        if y_hi - y_lo < 1e-9 {
            y_lo -= 1.0;
            y_hi += 1.0;
        }
    }
    x_lo = x_lo.min(x_hi);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - 2.0 * MARGIN_Y;
    let sx = |x: f64| MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |y: f64| MARGIN_Y + (y_hi - y) / (y_hi - y_lo) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_Y}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for t in ticks(x_lo, x_hi, 5) {
        let x = sx(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{t}</text>"##,
            MARGIN_Y,
            MARGIN_Y + plot_h,
            MARGIN_Y + plot_h + 15.0
        );
    }
    for t in ticks(y_lo, y_hi, 5) {
        let y = sy(t);
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN_LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{t}</text>"##,
            MARGIN_LEFT + plot_w,
            MARGIN_LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">env steps</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 6.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">mean episode return</text>"#,
        MARGIN_Y + plot_h / 2.0,
        MARGIN_Y + plot_h / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .metrics
            .iter()
            .filter_map(|m| m.mean_return.map(|r| format!("{:.2},{:.2}", sx(m.step as f64), sy(r))))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let ly = MARGIN_Y + 10.0 + 14.0 * i as f64;
        let lx = MARGIN_LEFT + plot_w + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 16.0,
            lx + 20.0,
            ly + 4.0,
            escape(&c.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlotOutput {
    pub files: Vec<PathBuf>,
    pub runs: usize,
    pub records: usize,
}

/// Writes `curves.csv` and `curves.svg` into every run directory under
/// `root`, and a combined pair into `root` when it holds several runs.
pub fn plot(root: &Path) -> Result<PlotOutput> {
    let curves = load_curves(root)?;
    let mut files = Vec::new();
    let mut write = |path: PathBuf, text: String| -> Result<()> {
        fs::write(&path, text).map_err(|e| DpfrlError::io(&path, e))?;
        files.push(path);
        Ok(())
    };
    for c in &curves {
        let one = std::slice::from_ref(c);
        write(c.dir.join(CURVES_CSV), curves_csv(one))?;
        write(c.dir.join(CURVES_SVG), curves_svg(&c.name, one))?;
    }
    if curves.len() > 1 || curves[0].dir != root {
        write(root.join(CURVES_CSV), curves_csv(&curves))?;
        write(root.join(CURVES_SVG), curves_svg(&root.display().to_string(), &curves))?;
    }
    Ok(PlotOutput {
        files,
        runs: curves.len(),
        records: curves.iter().map(|c| c.metrics.len()).sum(),
    })
}

/// Combined figure and CSV of an experiment's runs, written into its report
/// directory. Runs without a metrics log are left out.
pub fn plot_experiment(spec: &ExperimentSpec) -> Result<PlotOutput> {
    let mut curves = Vec::new();
    for run in spec.runs()? {
        if run.dir.join(METRICS_FILE).is_file() {
            curves.push(load_curve(run.name(), run.dir)?);
        }
    }
    if curves.is_empty() {
        return Err(DpfrlError::NoMetrics(spec.out_dir.join(super::RUNS_DIR)));
    }
    let dir = spec.report_dir();
    fs::create_dir_all(&dir).map_err(|e| DpfrlError::io(&dir, e))?;
    let csv = dir.join(CURVES_CSV);
    fs::write(&csv, curves_csv(&curves)).map_err(|e| DpfrlError::io(&csv, e))?;
    let svg = dir.join(CURVES_SVG);
    fs::write(&svg, curves_svg(&spec.name, &curves)).map_err(|e| DpfrlError::io(&svg, e))?;
    Ok(PlotOutput {
        files: vec![csv, svg],
        runs: curves.len(),
        records: curves.iter().map(|c| c.metrics.len()).sum(),
    })
}

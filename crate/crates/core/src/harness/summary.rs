//! Final-return summaries. The final return of a run is the trailing mean of
//! `mean_return` over the last 10% of its updates (at least one update).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::experiment::{run_state, Arm, ExperimentSpec, RunState};
use crate::error::{DpfrlError, Result};
use crate::trainer::{Metrics, METRICS_FILE};

/// Fraction of the updates averaged into a run's final return.
pub const TAIL_FRACTION: f64 = 0.1;
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_TXT: &str = "summary.txt";
/// Largest relative degradation from l = 0 to l = 100 counted as robust.
pub const ROBUST_DEGRADATION: f64 = 0.15;

pub fn read_metrics(path: &Path) -> Result<Vec<Metrics>> {
    let text = fs::read_to_string(path).map_err(|e| DpfrlError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DpfrlError::Parse(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Trailing mean of the recorded returns over the last `ceil(0.1·n)` updates.
/// `None` when no episode finished inside the window.
pub fn final_return(metrics: &[Metrics]) -> Option<f64> {
    if metrics.is_empty() {
        return None;
    }
    let window = ((metrics.len() as f64 * TAIL_FRACTION).ceil() as usize).max(1);
    let tail: Vec<f64> = metrics[metrics.len() - window..]
        .iter()
        .filter_map(|m| m.mean_return)
        .collect();
    if tail.is_empty() {
        None
    } else {
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub dir: PathBuf,
    pub final_return: Option<f64>,
    /// Set when the run is missing, unfinished or has no finished episodes.
    pub problem: Option<String>,
}

/// Per-seed final returns of one (arm, l) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub arm: Arm,
    pub noise_len: usize,
    pub seeds: Vec<SeedResult>,
}

impl CellSummary {
    /// Final returns of the usable seeds.
    pub fn returns(&self) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| s.final_return).collect()
    }

    pub fn median(&self) -> Option<f64> {
        median(&self.returns())
    }

    pub fn min(&self) -> Option<f64> {
        self.returns().into_iter().reduce(f64::min)
    }

    pub fn max(&self) -> Option<f64> {
        self.returns().into_iter().reduce(f64::max)
    }

    pub fn complete(&self) -> bool {
        self.seeds.iter().all(|s| s.problem.is_none())
    }
}

/// Median-based comparison of one arm between two noise lengths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Robustness {
    pub arm: Arm,
    pub from_l: usize,
    pub to_l: usize,
    /// `R(to) / R(from)`.
    pub ratio: f64,
    /// `(R(from) − R(to)) / |R(from)|`.
    pub degradation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveSummary {
    pub experiment: String,
    pub cells: Vec<CellSummary>,
}

impl CurveSummary {
    pub fn cell(&self, arm: Arm, noise_len: usize) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.arm == arm && c.noise_len == noise_len)
    }

    pub fn incomplete(&self) -> Vec<&SeedResult> {
        self.cells.iter().flat_map(|c| &c.seeds).filter(|s| s.problem.is_some()).collect()
    }

    pub fn robustness(&self, arm: Arm, from_l: usize, to_l: usize) -> Option<Robustness> {
        let a = self.cell(arm, from_l)?.median()?;
        let b = self.cell(arm, to_l)?.median()?;
        Some(robustness(arm, from_l, to_l, a, b))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# final_return: trailing mean of mean_return over the last {}% of updates",
            TAIL_FRACTION * 100.0
        );
        s.push_str("variant,K,l,seed,final_return,status\n");
        for c in &self.cells {
            for r in &c.seeds {
                let value = r.final_return.map(|v| v.to_string()).unwrap_or_default();
                let status = r.problem.as_deref().unwrap_or("ok");
                let _ = writeln!(s, "{},{},{},{},{value},{status}", c.arm.variant.tag(), c.arm.k, c.noise_len, r.seed);
            }
        }
        s
    }

    /// Plain-text table with medians, ranges and any flagged runs.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{}: final return = trailing mean of mean_return over the last {}% of updates\n",
            self.experiment,
            TAIL_FRACTION * 100.0
        );
        let _ = writeln!(s, "{:<24} {:>4} {:>5} {:>10} {:>10} {:>10}", "arm", "l", "seeds", "median", "min", "max");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<24} {:>4} {:>5} {:>10} {:>10} {:>10}",
                c.arm.label(),
                c.noise_len,
                format!("{}/{}", c.returns().len(), c.seeds.len()),
                fmt_opt(c.median()),
                fmt_opt(c.min()),
                fmt_opt(c.max()),
            );
        }
        let incomplete = self.incomplete();
        if !incomplete.is_empty() {
            s.push_str("\nflagged runs:\n");
            for r in incomplete {
                let _ = writeln!(s, "  {}: {}", r.dir.display(), r.problem.as_deref().unwrap_or(""));
            }
        }
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
}

pub fn robustness(arm: Arm, from_l: usize, to_l: usize, from: f64, to: f64) -> Robustness {
    Robustness {
        arm,
        from_l,
        to_l,
        ratio: to / from,
        degradation: (from - to) / from.abs(),
    }
}

/// Reads every run of `spec`. Missing or unfinished runs stay in the summary
/// with a problem note.
pub fn summarize(spec: &ExperimentSpec) -> Result<CurveSummary> {
    let runs = spec.runs()?;
    let mut cells: Vec<CellSummary> = Vec::new();
    for run in runs {
        let (final_return, problem) = match run_state(&run)? {
            RunState::Missing => (None, Some("missing".to_string())),
            state => {
                let metrics = read_metrics(&run.dir.join(METRICS_FILE))?;
                let fr = final_return(&metrics);
                let problem = match state {
                    RunState::Incomplete { records, expected } => {
                        Some(format!("incomplete ({records}/{expected} updates)"))
                    }
                    _ if fr.is_none() => Some("no finished episodes".to_string()),
                    _ => None,
                };
                (fr, problem)
            }
        };
        let seed = SeedResult {
            seed: run.seed,
            dir: run.dir.clone(),
            final_return,
            problem,
        };
        match cells.iter_mut().find(|c| c.arm == run.arm && c.noise_len == run.noise_len) {
            Some(c) => c.seeds.push(seed),
            None => cells.push(CellSummary {
                arm: run.arm,
                noise_len: run.noise_len,
                seeds: vec![seed],
            }),
        }
    }
    Ok(CurveSummary {
        experiment: spec.name.clone(),
        cells,
    })
}

/// Writes `summary.csv` and `summary.txt` into the experiment's report
/// directory and returns the table text.
pub fn write_summary(spec: &ExperimentSpec, summary: &CurveSummary, extra: &str) -> Result<String> {
    let dir = spec.report_dir();
    fs::create_dir_all(&dir).map_err(|e| DpfrlError::io(&dir, e))?;
    let csv = dir.join(SUMMARY_CSV);
    fs::write(&csv, summary.to_csv()).map_err(|e| DpfrlError::io(&csv, e))?;
    let table = format!("{}{extra}", summary.to_table());
    let txt = dir.join(SUMMARY_TXT);
    fs::write(&txt, &table).map_err(|e| DpfrlError::io(&txt, e))?;
    Ok(table)
}

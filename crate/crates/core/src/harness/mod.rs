//! Experiment grids, final-return summaries and learning-curve figures.

mod experiment;
mod plot;
mod summary;

use std::fmt;

pub use experiment::{
    count_metrics, execute, run_name, run_state, Arm, ExecutionReport, ExperimentSpec, RunSpec, RunState,
    ABLATION_NOISE_LEN, DEFAULT_SEEDS, RUNS_DIR, SWEEP_NOISE_LENS,
};
pub use plot::{curves_csv, curves_svg, find_runs, load_curves, plot, plot_experiment, Curve, PlotOutput, CURVES_CSV, CURVES_SVG};
pub use summary::{
    final_return, median, read_metrics, robustness, summarize, write_summary, CellSummary, CurveSummary, Robustness,
    SeedResult, ROBUST_DEGRADATION, SUMMARY_CSV, SUMMARY_TXT, TAIL_FRACTION,
};

use crate::nets::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    /// Medians disagree but the seed ranges overlap.
    Tie,
    Fail,
    /// A required cell has no usable runs.
    Missing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub claim: String,
    pub outcome: Outcome,
    pub detail: String,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.outcome {
            Outcome::Pass => "PASS",
            Outcome::Tie => "TIE",
            Outcome::Fail => "FAIL",
            Outcome::Missing => "MISSING",
        };
        write!(f, "{tag}: {} ({})", self.claim, self.detail)
    }
}

fn missing(claim: &str) -> Verdict {
    Verdict {
        claim: claim.into(),
        outcome: Outcome::Missing,
        detail: "cells without finished runs".into(),
    }
}

/// Robustness of DPFRL between the smallest and largest noise length, and
/// whether the GRU baseline degrades more.
pub fn sweep_verdicts(summary: &CurveSummary, dpfrl: Arm, gru: Arm, from_l: usize, to_l: usize) -> Vec<Verdict> {
    let claim_robust = format!(
        "{} median return at l={to_l} within {}% of l={from_l}",
        dpfrl.label(),
        ROBUST_DEGRADATION * 100.0
    );
    let claim_gru = format!("{} degrades more than {} from l={from_l} to l={to_l}", gru.label(), dpfrl.label());
    let d = summary.robustness(dpfrl, from_l, to_l);
    let g = summary.robustness(gru, from_l, to_l);
    let mut out = Vec::new();
    out.push(match &d {
        Some(d) => Verdict {
            claim: claim_robust,
            outcome: if d.degradation <= ROBUST_DEGRADATION { Outcome::Pass } else { Outcome::Fail },
            detail: format!("ratio {:.3}, relative degradation {:.3}", d.ratio, d.degradation),
        },
        None => missing(&claim_robust),
    });
    out.push(match (&d, &g) {
        (Some(d), Some(g)) => Verdict {
            claim: claim_gru,
            outcome: if g.degradation > d.degradation { Outcome::Pass } else { Outcome::Fail },
            detail: format!("degradation {:.3} vs {:.3}", g.degradation, d.degradation),
        },
        _ => missing(&claim_gru),
    });
    out
}

/// `better` should reach at least the median of `worse`; overlapping seed
/// ranges make a shortfall a tie.
pub fn at_least(summary: &CurveSummary, better: Arm, worse: Arm, l: usize) -> Verdict {
    let claim = format!("{} >= {} at l={l}", better.label(), worse.label());
    let (Some(a), Some(b)) = (summary.cell(better, l), summary.cell(worse, l)) else {
        return missing(&claim);
    };
    let (Some(ma), Some(mb)) = (a.median(), b.median()) else {
        return missing(&claim);
    };
    let overlap = a.max().zip(b.min()).is_some_and(|(amax, bmin)| amax >= bmin);
    let outcome = if ma >= mb {
        Outcome::Pass
    } else if overlap {
        Outcome::Tie
    } else {
        Outcome::Fail
    };
    Verdict {
        claim,
        outcome,
        detail: format!("medians {ma:.3} vs {mb:.3}"),
    }
}

/// More particles and MGF features against their ablations.
pub fn ablation_verdicts(summary: &CurveSummary, k: usize, l: usize) -> Vec<Verdict> {
    let full = Arm::new(Variant::Dpfrl, k);
    vec![
        at_least(summary, full, Arm::new(Variant::Dpfrl, 1), l),
        at_least(summary, full, Arm::new(Variant::DpfrlMean, k), l),
    ]
}

pub fn verdict_text(verdicts: &[Verdict]) -> String {
    let mut s = String::from("\n");
    for v in verdicts {
        s.push_str(&v.to_string());
        s.push('\n');
    }
    s
}

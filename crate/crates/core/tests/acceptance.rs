//! One line per acceptance criterion; exits nonzero if any criterion fails.
//!
//! Criteria 4 and 5 read the sweep and ablation runs under `experiments/` at
//! the workspace root (or `$DPFRL_EXPERIMENTS`). Runs that are missing are
//! reported as NOT RUN; with `DPFRL_ACCEPTANCE_TRAIN=1` they are trained first,
//! which takes hours.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::*;
use dpfrl_core::harness::{self, ablation_verdicts, sweep_verdicts, Arm, ExperimentSpec, Outcome, Verdict};
use dpfrl_core::nets::Variant;
use dpfrl_core::trainer::{self, full_pipeline_gradcheck, gradcheck_config, TrainConfig, GRADCHECK_TOLERANCE};

enum Status {
    Pass,
    Fail,
    NotRun,
}

struct Line {
    id: u32,
    name: &'static str,
    status: Status,
    detail: String,
}

fn status(ok: bool) -> Status {
    if ok {
        Status::Pass
    } else {
        Status::Fail
    }
}

fn gradient_fidelity() -> Line {
    let start = Instant::now();
    let r = full_pipeline_gradcheck(&gradcheck_config(), 1e-5);
    let secs = start.elapsed().as_secs_f64();
    let (st, detail) = match r {
        Ok(r) => (
            status(r.max_rel_error < GRADCHECK_TOLERANCE && secs < 60.0),
            format!(
                "max rel error {:.3e} over {} coordinates in {secs:.1} s",
                r.max_rel_error, r.coordinates
            ),
        ),
        Err(e) => (Status::Fail, e.to_string()),
    };
    Line {
        id: 1,
        name: "gradient fidelity",
        status: st,
        detail,
    }
}

fn filter_invariants() -> Line {
    let start = Instant::now();
    let mut r = rng(21);
    let (envs, k) = (4, 30);
    let prior = normals(&mut r, envs * k, 2.0);
    let logits = normals(&mut r, envs * k, 10.0);
    let norm = normalization_error(&prior, &logits, envs, k);
    let (chi, critical) = resample_chi_square(&[0.5, 0.3, 0.15, 0.05], 0.9, 100_000, 0.01, 22);
    let bias = resample_mean_bias(30, 0.9, 20_000, 23);
    let (m0, dm) = mgf_identity_errors(3, 30, 8, 24);
    let perm = permutation_error(4, 30, 16, 3, 25);
    let shift = logit_shift_error(&prior, &logits, 37.5, envs, k);
    let secs = start.elapsed().as_secs_f64();
    let ok = norm < 1e-6 && chi < critical && bias < 0.01 && m0 < 1e-12 && dm < 1e-5 && perm < 1e-9 && shift < 1e-9;
    Line {
        id: 2,
        name: "filter invariants",
        status: status(ok && secs < 120.0),
        detail: format!(
            "normalization {norm:.1e}, chi-square {chi:.2} < {critical:.2}, mean bias {bias:.2e}, \
             M(0) {m0:.1e}, dM/dv {dm:.1e}, permutation {perm:.1e}, shift {shift:.1e}, {secs:.1} s"
        ),
    }
}

fn env_statistics() -> Line {
    let tv = transition_variance(100_000, 31);
    let ov = observation_variance(100_000, 32);
    let lengths = episode_lengths(10, 33);
    let ok = tv.iter().all(|v| (v - 0.25).abs() / 0.25 < 0.05)
        && ov.iter().all(|v| (v - 1.0).abs() < 0.05)
        && lengths.iter().all(|&n| n == 75);
    Line {
        id: 3,
        name: "environment statistics",
        status: status(ok),
        detail: format!(
            "transition var {:.4}/{:.4}, observation var {:.4}/{:.4}, episode lengths {}..={}",
            tv[0],
            tv[1],
            ov[0],
            ov[1],
            lengths.iter().min().unwrap(),
            lengths.iter().max().unwrap()
        ),
    }
}

fn experiments_dir() -> PathBuf {
    std::env::var_os("DPFRL_EXPERIMENTS")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            let root = PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../.."));
            root.canonicalize().unwrap_or(root).join("experiments")
        })
}

fn verdict_line(id: u32, name: &'static str, spec: &ExperimentSpec, verdicts: impl Fn(&harness::CurveSummary) -> Vec<Verdict>) -> Line {
    let result = (|| -> dpfrl_core::Result<Line> {
        if std::env::var_os("DPFRL_ACCEPTANCE_TRAIN").is_some() {
            harness::execute(spec)?;
        }
        let summary = harness::summarize(spec)?;
        let flagged = summary.incomplete().len();
        let v = verdicts(&summary);
        let text: Vec<String> = v.iter().map(|v| v.to_string()).collect();
        let st = if flagged > 0 || v.iter().any(|v| v.outcome == Outcome::Missing) {
            Status::NotRun
        } else {
            // a tie within seed noise is reported but does not fail
            status(v.iter().all(|v| matches!(v.outcome, Outcome::Pass | Outcome::Tie)))
        };
        let mut detail = text.join("; ");
        if flagged > 0 {
            detail = format!("{flagged} runs missing or unfinished under {}; {detail}", spec.out_dir.display());
        }
        Ok(Line { id, name, status: st, detail })
    })();
    result.unwrap_or_else(|e| Line {
        id,
        name,
        status: Status::Fail,
        detail: e.to_string(),
    })
}

fn robustness() -> Line {
    let base = TrainConfig::default();
    let spec = ExperimentSpec::sweep(base.clone(), experiments_dir());
    verdict_line(4, "robustness to observation noise", &spec, |s| {
        sweep_verdicts(s, Arm::new(Variant::Dpfrl, base.k), Arm::new(Variant::Gru, 1), 0, 100)
    })
}

fn ablations() -> Line {
    let base = TrainConfig::default();
    let spec = ExperimentSpec::ablation(base.clone(), harness::ABLATION_NOISE_LEN, experiments_dir());
    verdict_line(5, "ablation trends", &spec, |s| {
        ablation_verdicts(s, base.k, harness::ABLATION_NOISE_LEN)
    })
}

fn determinism() -> Line {
    let result = (|| -> dpfrl_core::Result<(bool, usize)> {
        let cfg = TrainConfig {
            total_steps: 50 * TrainConfig::default().steps_per_update(),
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().map_err(|e| dpfrl_core::DpfrlError::io("tempdir", e))?;
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        trainer::train(&cfg, &a)?;
        trainer::train(&cfg, &b)?;
        let ma = std::fs::read(a.join(trainer::METRICS_FILE)).map_err(|e| dpfrl_core::DpfrlError::io(&a, e))?;
        let mb = std::fs::read(b.join(trainer::METRICS_FILE)).map_err(|e| dpfrl_core::DpfrlError::io(&b, e))?;
        let lines = ma.iter().filter(|&&c| c == b'\n').count();
        Ok((ma == mb && lines == 50, lines))
    })();
    let (st, detail) = match result {
        Ok((same, lines)) => (
            status(same),
            format!("{lines} metrics records, streams {}", if same { "byte-identical" } else { "differ" }),
        ),
        Err(e) => (Status::Fail, e.to_string()),
    };
    Line {
        id: 6,
        name: "determinism",
        status: st,
        detail,
    }
}

fn gru_equivalence() -> Line {
    let (gap, dp_cell, gru_cell) = gru_transition_gap(128, 4, 41);
    Line {
        id: 7,
        name: "GRU baseline equals K=1 noiseless transition",
        status: status(gap == 0.0 && dp_cell == gru_cell),
        detail: format!("max |difference| {gap:e}, shared cell parameters {dp_cell} vs {gru_cell}"),
    }
}

fn main() {
    let checks: [fn() -> Line; 7] = [
        gradient_fidelity,
        filter_invariants,
        env_statistics,
        robustness,
        ablations,
        determinism,
        gru_equivalence,
    ];
    let mut failed = 0;
    for check in checks {
        let line = check();
        let tag = match line.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::NotRun => "NOT RUN",
        };
        println!("criterion {} ({}): {tag}: {}", line.id, line.name, line.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

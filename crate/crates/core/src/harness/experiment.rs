use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{DpfrlError, Result};
use crate::nets::Variant;
use crate::trainer::{self, TrainConfig, CONFIG_FILE, FINAL_CHECKPOINT, METRICS_FILE};

pub const SWEEP_NOISE_LENS: [usize; 3] = [0, 50, 100];
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];
pub const ABLATION_NOISE_LEN: usize = 50;
/// Subdirectory of an experiment root holding one directory per run.
pub const RUNS_DIR: &str = "runs";

/// A model variant at a particle count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Arm {
    pub variant: Variant,
    /// Ignored for variants without particles.
    pub k: usize,
}

impl Arm {
    pub fn new(variant: Variant, k: usize) -> Self {
        let k = if variant.uses_particles() { k } else { 1 };
        Arm { variant, k }
    }

    /// Directory-safe label, e.g. `dpfrl-K30` or `gru`.
    pub fn label(&self) -> String {
        if self.variant.uses_particles() {
            format!("{}-K{}", self.variant.tag(), self.k)
        } else {
            self.variant.tag().to_string()
        }
    }
}

/// One training run of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub arm: Arm,
    pub noise_len: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub dir: PathBuf,
}

impl RunSpec {
    pub fn name(&self) -> String {
        run_name(self.arm, self.noise_len, self.seed)
    }
}

pub fn run_name(arm: Arm, noise_len: usize, seed: u64) -> String {
    format!("{}-l{}-s{}", arm.label(), noise_len, seed)
}

/// A grid of training runs: arms × noise lengths × seeds over a base config.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub base: TrainConfig,
    pub arms: Vec<Arm>,
    pub noise_lens: Vec<usize>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    /// DPFRL and the GRU baseline over l ∈ {0, 50, 100}.
    pub fn sweep(base: TrainConfig, out_dir: impl Into<PathBuf>) -> Self {
        let arms = vec![Arm::new(Variant::Dpfrl, base.k), Arm::new(Variant::Gru, 1)];
        ExperimentSpec {
            name: "sweep".into(),
            base,
            arms,
            noise_lens: SWEEP_NOISE_LENS.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
            out_dir: out_dir.into(),
        }
    }

    /// Every DPFRL variant plus the single-particle model at one noise length.
    pub fn ablation(base: TrainConfig, noise_len: usize, out_dir: impl Into<PathBuf>) -> Self {
        let k = base.k;
        let arms = vec![
            Arm::new(Variant::Dpfrl, k),
            Arm::new(Variant::Dpfrl, 1),
            Arm::new(Variant::DpfrlMean, k),
            Arm::new(Variant::DpfrlGrumerge, k),
            Arm::new(Variant::DpfrlGenerative, k),
        ];
        ExperimentSpec {
            name: "ablation".into(),
            base,
            arms,
            noise_lens: vec![noise_len],
            seeds: DEFAULT_SEEDS.to_vec(),
            out_dir: out_dir.into(),
        }
    }

    /// Cross product over the axes, arms outermost and seeds innermost.
    /// Duplicate runs (same arm, l and seed) are listed once.
    pub fn runs(&self) -> Result<Vec<RunSpec>> {
        let runs_dir = self.out_dir.join(RUNS_DIR);
        let mut out: Vec<RunSpec> = Vec::new();
        for &arm in &self.arms {
            for &l in &self.noise_lens {
                for &seed in &self.seeds {
                    let config = TrainConfig {
                        variant: arm.variant,
                        k: arm.k,
                        noise_len: l,
                        seed,
                        ..self.base.clone()
                    };
                    config.validate()?;
                    let run = RunSpec {
                        arm,
                        noise_len: l,
                        seed,
                        dir: runs_dir.join(run_name(arm, l, seed)),
                        config,
                    };
                    if !out.iter().any(|r| r.dir == run.dir) {
                        out.push(run);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Directory for this experiment's summary and figures.
    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunState {
    Missing,
    /// Present but short of the expected metrics or the final checkpoint.
    Incomplete { records: u64, expected: u64 },
    Complete,
}

pub fn count_metrics(dir: &Path) -> Result<u64> {
    let path = dir.join(METRICS_FILE);
    match fs::read_to_string(&path) {
        Ok(text) => Ok(text.lines().filter(|l| !l.trim().is_empty()).count() as u64),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(0),
        Err(e) => Err(DpfrlError::io(&path, e)),
    }
}

/// Inspects a run directory. A directory whose config echo differs from
/// `run.config` is an error rather than something to overwrite.
pub fn run_state(run: &RunSpec) -> Result<RunState> {
    let cfg_path = run.dir.join(CONFIG_FILE);
    if !cfg_path.exists() {
        return Ok(RunState::Missing);
    }
    let existing = TrainConfig::load(&cfg_path)?;
    if existing != run.config {
        return Err(DpfrlError::Config(format!(
            "{} holds a run with a different config",
            run.dir.display()
        )));
    }
    let expected = run.config.total_updates();
    let records = count_metrics(&run.dir)?;
    let final_ck = run.dir.join("checkpoints").join(FINAL_CHECKPOINT);
    if records == expected && final_ck.exists() {
        Ok(RunState::Complete)
    } else {
        Ok(RunState::Incomplete { records, expected })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExecutionReport {
    pub trained: usize,
    pub skipped: usize,
}

/// Trains every run that is not already complete, in enumeration order.
/// Incomplete runs restart from scratch.
pub fn execute(spec: &ExperimentSpec) -> Result<ExecutionReport> {
    let runs = spec.runs()?;
    let mut report = ExecutionReport::default();
    for (i, run) in runs.iter().enumerate() {
        match run_state(run)? {
            RunState::Complete => {
                log::info!("[{}/{}] {} already complete", i + 1, runs.len(), run.name());
                report.skipped += 1;
            }
            state => {
                log::info!("[{}/{}] training {} ({state:?})", i + 1, runs.len(), run.name());
                trainer::train(&run.config, &run.dir)?;
                report.trained += 1;
            }
        }
    }
    Ok(report)
}

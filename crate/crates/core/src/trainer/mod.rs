//! A2C over belief-conditioned policies: rollouts, returns, loss, the update
//! loop with metrics and checkpoints, and greedy evaluation.

mod config;
mod rollout;

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dpfrl_autodiff::{clip_global_norm, global_norm, grad_check, AdError, GradCheckReport, RmsProp, Scalar, StepOutcome, Tape};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::belief::{particle_csv_header, write_particle_rows, ResampleRecord};
use crate::env::{squash_action, HikeConfig, VecEnv};
use crate::error::{DpfrlError, Result};
use crate::nets::{Bound, Checkpoint, MemoryState, Mode, Model};
use crate::rng::{stream_rng, Stream};

pub use config::{Precision, TrainConfig, SEED_ENV};
pub use rollout::{
    a2c_loss, a2c_loss_with, compute_returns, unroll, Carry, LiveDriver, LossParts, ReplayDriver, RolloutBatch, RolloutDriver,
    RolloutOpts, Unrolled,
};

/// Episodes averaged into `mean_return`.
pub const RETURN_WINDOW: usize = 100;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.json";
pub const PARTICLES_FILE: &str = "particles.csv";

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Env steps taken so far, summed over environments.
    pub step: u64,
    pub update: u64,
    pub episodes: u64,
    /// Mean over the last 100 finished episodes; null before the first.
    pub mean_return: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One line of `timing.jsonl`, kept apart so the metrics stream is reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub update: u64,
    pub wall_time: f64,
}

/// In-memory training state.
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub model: Model<T>,
    opt: RmsProp<T>,
    env: VecEnv,
    carry: Carry<T>,
    update: u64,
    episodes: u64,
    recent: VecDeque<f64>,
    dump_dir: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::<T>::new(cfg.model_config())?;
        let opt = RmsProp::new(
            &model.params.sizes(),
            T::from_f64_lossy(cfg.lr),
            T::from_f64_lossy(cfg.rms_alpha),
            T::from_f64_lossy(cfg.rms_eps),
        );
        let mut env = VecEnv::new(cfg.hike_config()?, cfg.envs, cfg.seed)?;
        env.parallel = cfg.parallel_envs;
        let carry = Carry::start(env.reset());
        Ok(Trainer {
            cfg,
            model,
            opt,
            env,
            carry,
            update: 0,
            episodes: 0,
            recent: VecDeque::with_capacity(RETURN_WINDOW),
            dump_dir: None,
        })
    }

    /// Directory for diagnostics written when an update turns non-finite.
    pub fn with_dump_dir(mut self, dir: PathBuf) -> Self {
        self.dump_dir = Some(dir);
        self
    }

    pub fn carry(&self) -> &Carry<T> {
        &self.carry
    }

    pub fn updates_done(&self) -> u64 {
        self.update
    }

    fn opts(&self) -> RolloutOpts {
        RolloutOpts {
            n_steps: self.cfg.n_steps,
            filter_noise: self.cfg.filter_noise,
            max_step: self.cfg.max_step,
            bootstrap: true,
        }
    }

    fn abort(&self, detail: String, batch: &RolloutBatch) -> DpfrlError {
        let dir = self.dump_dir.clone().unwrap_or_else(std::env::temp_dir).join("abort");
        let written = (|| -> Result<()> {
            fs::create_dir_all(&dir).map_err(|e| DpfrlError::io(&dir, e))?;
            let cfg = serde_json::to_value(&self.cfg).map_err(|e| DpfrlError::Checkpoint(e.to_string()))?;
            self.model.to_checkpoint(cfg).save(&dir.join("checkpoint.json"))?;
            let p = dir.join("batch.json");
            let text = serde_json::to_string(batch).map_err(|e| DpfrlError::Checkpoint(e.to_string()))?;
            fs::write(&p, text).map_err(|e| DpfrlError::io(&p, e))
        })();
        if let Err(e) = written {
            log::error!("could not write diagnostic dump: {e}");
        }
        DpfrlError::Training { detail, dump: dir }
    }

    /// Collect → returns → loss → backward → clip → RMSProp.
    pub fn step(&mut self) -> Result<Metrics> {
        let mut tape = Tape::<T>::new();
        let b = self.model.bind(&mut tape, true)?;
        let opts = self.opts();
        let collected = 'collect: {
            let mut fwd = self.model.fwd(Mode::Train);
            let mut driver = LiveDriver::new(&mut self.env, self.cfg.seed, false);
            let mut record = ResampleRecord::new();
            let unrolled = unroll(
                &mut tape,
                &self.model,
                &b,
                &mut fwd,
                &self.carry,
                &opts,
                &mut driver,
                &mut record,
            );
            let (out, next) = match unrolled {
                Ok(x) => x,
                Err(e @ (DpfrlError::Filter { .. } | DpfrlError::Autodiff(AdError::NonFinite { .. }))) => {
                    break 'collect Err((e, std::mem::take(&mut driver.batch)));
                }
                Err(e) => return Err(e),
            };
            let returns = compute_returns(&out.rewards, &out.dones, &out.bootstrap, self.cfg.gamma);
            let loss = a2c_loss(
                &mut tape,
                &out.log_probs,
                &out.values,
                out.entropy,
                &returns,
                self.cfg.value_coef,
                self.cfg.entropy_coef,
            )?;
            Ok((out, next, fwd.updates, driver.batch, loss))
        };
        let (out, next, updates, batch, loss) = match collected {
            Ok(x) => x,
            Err((e, batch)) => return Err(self.abort(e.to_string(), &batch)),
        };
        let total = tape.item(loss.total).as_f64();
        if !total.is_finite() {
            return Err(self.abort(format!("non-finite loss {total} at update {}", self.update + 1), &batch));
        }
        tape.backward(loss.total)?;
        let mut grads = self.model.params.grads(&tape, &b);
        let norm = global_norm(&grads).as_f64();
        clip_global_norm(&mut grads, T::from_f64_lossy(self.cfg.clip));
        if self.opt.step(self.model.params.values_mut(), &grads) == StepOutcome::SkippedNonFinite {
            return Err(self.abort(format!("non-finite gradient at update {}", self.update + 1), &batch));
        }
        if !self.model.params.all_finite() {
            return Err(self.abort(format!("non-finite parameters after update {}", self.update + 1), &batch));
        }
        self.model.apply_stats(updates);
        self.carry = next;
        self.update += 1;
        for r in out.finished_returns {
            self.episodes += 1;
            if self.recent.len() == RETURN_WINDOW {
                self.recent.pop_front();
            }
            self.recent.push_back(r);
        }
        let mean_return = (!self.recent.is_empty()).then(|| self.recent.iter().sum::<f64>() / self.recent.len() as f64);
        Ok(Metrics {
            step: self.update * self.cfg.steps_per_update(),
            update: self.update,
            episodes: self.episodes,
            mean_return,
            policy_loss: tape.item(loss.policy).as_f64(),
            value_loss: tape.item(loss.value).as_f64(),
            entropy_loss: tape.item(loss.entropy).as_f64(),
            grad_norm: norm,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let cfg = serde_json::to_value(&self.cfg).map_err(|e| DpfrlError::Checkpoint(e.to_string()))?;
        Ok(self.model.to_checkpoint(cfg))
    }
}

/// Outcome of a finished `train` run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub updates: u64,
    pub episodes: u64,
    pub final_mean_return: Option<f64>,
}

fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| DpfrlError::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn write_line<W: Write>(w: &mut W, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}")
        .and_then(|_| w.flush())
        .map_err(|e| DpfrlError::io(path, e))
}

/// Trains per `cfg`, writing the config echo, metrics, timing, checkpoints
/// and (optionally) particle dumps into `run_dir`.
pub fn train(cfg: &TrainConfig, run_dir: &Path) -> Result<RunSummary> {
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, run_dir),
        Precision::F64 => train_with::<f64>(cfg, run_dir),
    }
}

fn train_with<T: Scalar>(cfg: &TrainConfig, run_dir: &Path) -> Result<RunSummary> {
    let ck_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(|e| DpfrlError::io(&ck_dir, e))?;
    let cfg_path = run_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| DpfrlError::io(&cfg_path, e))?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let timing_path = run_dir.join(TIMING_FILE);
    let mut metrics = create_writer(&metrics_path)?;
    let mut timing = create_writer(&timing_path)?;
    let particles_path = run_dir.join(PARTICLES_FILE);
    let mut particles = if cfg.particle_dump && cfg.variant.uses_particles() {
        let mut w = create_writer(&particles_path)?;
        write_line(&mut w, &particles_path, &particle_csv_header(cfg.h))?;
        Some(w)
    } else {
        None
    };

    let mut trainer = Trainer::<T>::new(cfg.clone())?.with_dump_dir(run_dir.to_path_buf());
    let start = Instant::now();
    let total = cfg.total_updates();
    let mut last = None;
    for _ in 0..total {
        let m = trainer.step()?;
        let line = serde_json::to_string(&m).map_err(|e| DpfrlError::Parse(e.to_string()))?;
        write_line(&mut metrics, &metrics_path, &line)?;
        let t = Timing {
            update: m.update,
            wall_time: start.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&t).map_err(|e| DpfrlError::Parse(e.to_string()))?;
        write_line(&mut timing, &timing_path, &line)?;
        if let (Some(w), Some(MemoryState::Particles(state))) = (particles.as_mut(), &trainer.carry.memory) {
            write_particle_rows(w, state, trainer.carry.step).map_err(|e| DpfrlError::io(&particles_path, e))?;
        }
        if cfg.checkpoint_interval > 0 && m.update % cfg.checkpoint_interval == 0 {
            trainer
                .checkpoint()?
                .save(&ck_dir.join(format!("update_{:07}.json", m.update)))?;
        }
        if m.update % 100 == 0 || m.update == total {
            log::info!(
                "update {}/{} step {} episodes {} mean_return {:?}",
                m.update,
                total,
                m.step,
                m.episodes,
                m.mean_return
            );
        }
        last = Some(m);
    }
    trainer.checkpoint()?.save(&ck_dir.join(FINAL_CHECKPOINT))?;
    if let Some(mut w) = particles {
        w.flush().map_err(|e| DpfrlError::io(&particles_path, e))?;
    }
    let last = last.expect("at least one update");
    Ok(RunSummary {
        updates: last.update,
        episodes: last.episodes,
        final_mean_return: last.mean_return,
    })
}

/// Per-episode accumulated reward statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub returns: Vec<f64>,
}

impl EvalReport {
    fn from_returns(mut returns: Vec<f64>, episodes: usize) -> Result<Self> {
        returns.truncate(episodes);
        if returns.is_empty() {
            return Err(DpfrlError::EmptyReport);
        }
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(EvalReport {
            episodes: returns.len(),
            mean,
            std,
            returns,
        })
    }
}

/// Greedy (mean-action) evaluation with batch-norm in eval mode.
pub fn evaluate<T: Scalar>(model: &Model<T>, cfg: &TrainConfig, episodes: usize, seed: u64) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(DpfrlError::EmptyReport);
    }
    let hike = cfg.hike_config()?;
    let envs = cfg.envs.min(episodes);
    let mut env = VecEnv::new(hike.clone(), envs, seed)?;
    let mut carry = Carry::<T>::start(env.reset());
    let opts = RolloutOpts {
        n_steps: 1,
        filter_noise: cfg.filter_noise,
        max_step: cfg.max_step,
        bootstrap: false,
    };
    let mut returns = Vec::with_capacity(episodes);
    while returns.len() < episodes {
        for _ in 0..hike.episode_len {
            let mut tape = Tape::<T>::new();
            let b = model.bind(&mut tape, false)?;
            let mut fwd = model.fwd(Mode::Eval);
            let mut driver = LiveDriver::new(&mut env, seed, true);
            let mut record = ResampleRecord::new();
            let (out, next) = unroll(&mut tape, model, &b, &mut fwd, &carry, &opts, &mut driver, &mut record)?;
            returns.extend(out.finished_returns);
            carry = next;
        }
    }
    EvalReport::from_returns(returns, episodes)
}

/// Loads `checkpoint` into a model built from `cfg` (shapes must match) and evaluates it.
pub fn evaluate_checkpoint(checkpoint: &Path, cfg: &TrainConfig, episodes: usize, seed: u64) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut model = Model::<f64>::new(cfg.model_config())?;
    model.load_checkpoint(&ck)?;
    evaluate(&model, cfg, episodes, seed)
}

/// Episodes under a policy whose raw actions are standard normal, squashed as in training.
pub fn evaluate_random(hike: &HikeConfig, episodes: usize, seed: u64) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(DpfrlError::EmptyReport);
    }
    let envs = episodes.min(16);
    let mut env = VecEnv::new(hike.clone(), envs, seed)?;
    env.reset();
    let mut returns = Vec::with_capacity(episodes);
    let mut t = 0u64;
    while returns.len() < episodes {
        let actions: Vec<[f64; 2]> = (0..envs)
            .map(|e| {
                let mut rng = stream_rng(seed, Stream::Evaluation, e as u64, t);
                let raw = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                squash_action(raw, hike.max_step)
            })
            .collect();
        returns.extend(env.step(&actions)?.finished_returns);
        t += 1;
    }
    EvalReport::from_returns(returns, episodes)
}

/// Smallest setting that exercises every pipeline stage over several steps:
/// K = 3, H = 8, l = 2 at 64-bit with the default layer widths. Four envs,
/// since batch norm over two rows leaves features whose rows nearly coincide
/// too curved for central differences.
pub fn gradcheck_config() -> TrainConfig {
    TrainConfig {
        k: 3,
        h: 8,
        noise_len: 2,
        envs: 4,
        n_steps: 3,
        precision: Precision::F64,
        ..TrainConfig::default()
    }
}

/// Largest acceptable relative error of [`full_pipeline_gradcheck`].
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Std of the deterministic offset added to every parameter before a pipeline check.
pub const GRADCHECK_JITTER: f64 = 0.05;

/// Finite-difference check of the whole pipeline: `n_steps` of encode →
/// transition → reweight → soft-resample → features → heads, then the A2C
/// loss, differentiated w.r.t. every parameter at 64-bit.
///
/// Actions, transitions and resampling indices are recorded once and replayed
/// for every perturbed evaluation; returns and advantages are held fixed.
/// Parameters are offset by [`GRADCHECK_JITTER`] first.
pub fn full_pipeline_gradcheck(cfg: &TrainConfig, step: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut model = Model::<f64>::new(cfg.model_config())?;
    // zero biases put batch-normed constant inputs exactly on a relu kink
    let mut rng = stream_rng(cfg.seed, Stream::ParamInit, u64::MAX, 0);
    for values in model.params.values_mut() {
        for v in values {
            *v += GRADCHECK_JITTER * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut env = VecEnv::new(cfg.hike_config()?, cfg.envs, cfg.seed)?;
    let carry = Carry::<f64>::start(env.reset());
    let opts = RolloutOpts {
        n_steps: cfg.n_steps,
        filter_noise: cfg.filter_noise,
        max_step: cfg.max_step,
        bootstrap: true,
    };
    let mut record = ResampleRecord::new();
    let (batch, returns, advantages, live_loss) = {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false)?;
        let mut fwd = model.fwd(Mode::Train);
        let mut driver = LiveDriver::new(&mut env, cfg.seed, false);
        let (out, _) = unroll(&mut tape, &model, &b, &mut fwd, &carry, &opts, &mut driver, &mut record)?;
        let returns = compute_returns(&out.rewards, &out.dones, &out.bootstrap, cfg.gamma);
        let loss = a2c_loss(
            &mut tape,
            &out.log_probs,
            &out.values,
            out.entropy,
            &returns,
            cfg.value_coef,
            cfg.entropy_coef,
        )?;
        let advantages: Vec<Vec<f64>> = returns
            .iter()
            .zip(&out.values)
            .map(|(r, &v)| r.iter().zip(tape.value(v)).map(|(r, v)| r - v).collect())
            .collect();
        (driver.batch, returns, advantages, tape.item(loss.total))
    };
    let replay_opts = RolloutOpts {
        bootstrap: false,
        ..opts
    };
    let build = |tape: &mut Tape<f64>, vars: &[dpfrl_autodiff::Var]| -> std::result::Result<_, AdError> {
        let mut inner = || -> Result<_> {
            let b = Bound { vars: vars.to_vec() };
            let mut fwd = model.fwd(Mode::Train);
            let mut driver = ReplayDriver::new(batch.clone());
            let mut rec = record.clone();
            rec.replay();
            let (out, _) = unroll(tape, &model, &b, &mut fwd, &carry, &replay_opts, &mut driver, &mut rec)?;
            let loss = a2c_loss_with(
                tape,
                &out.log_probs,
                &out.values,
                out.entropy,
                &returns,
                Some(&advantages),
                cfg.value_coef,
                cfg.entropy_coef,
            )?;
            Ok(loss.total)
        };
        inner().map_err(|e| match e {
            DpfrlError::Autodiff(a) => a,
            other => AdError::Contract(other.to_string()),
        })
    };
    let inputs: Vec<(Vec<f64>, Vec<usize>)> = model
        .params
        .iter()
        .map(|p| (p.values.clone(), p.shape.clone()))
        .collect();
    // the replayed graph must reproduce the live loss before any perturbation
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false)?;
    let replayed = build(&mut tape, &b.vars)?;
    if tape.item(replayed) != live_loss {
        return Err(DpfrlError::Config(format!(
            "replayed loss {} differs from live loss {live_loss}",
            tape.item(replayed)
        )));
    }
    Ok(grad_check(build, &inputs, step)?)
}

#[cfg(test)]
mod tests;

//! Mountain Hike: a 2-D continuous-control POMDP with noisy position readings
//! and a vector of irrelevant uniform noise appended to every observation.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{DpfrlError, Result};
use crate::rng::{stream_rng, Stream};

pub const MAP_BOUND: f64 = 10.0;

/// Reward surface `r(x, y)` over `[−10, 10]²`.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardMap {
    /// `peak·exp(−‖p − goal‖² / width) + floor`
    Bowl {
        goal: [f64; 2],
        width: f64,
        peak: f64,
        floor: f64,
    },
    Grid(GridMap),
}

impl Default for RewardMap {
    fn default() -> Self {
        RewardMap::Bowl {
            goal: [7.0, 7.0],
            width: 18.0,
            peak: 2.0,
            floor: -1.0,
        }
    }
}

/// Grid of reward samples, bilinearly interpolated.
///
/// Text format: a header line `nx ny xmin xmax ymin ymax`, then `nx·ny`
/// whitespace-separated values with `x` varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub nx: usize,
    pub ny: usize,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub values: Vec<f64>,
}

impl GridMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut next = |what: &str| -> Result<&str> {
            tokens
                .next()
                .ok_or_else(|| DpfrlError::Parse(format!("reward grid: missing {what}")))
        };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| DpfrlError::Parse(format!("reward grid: bad size {s:?}: {e}")))
        };
        let float = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| DpfrlError::Parse(format!("reward grid: bad number {s:?}: {e}")))
        };
        let nx = int(next("nx")?)?;
        let ny = int(next("ny")?)?;
        let x_range = [float(next("xmin")?)?, float(next("xmax")?)?];
        let y_range = [float(next("ymin")?)?, float(next("ymax")?)?];
        if nx < 2 || ny < 2 {
            return Err(DpfrlError::Parse("reward grid needs at least 2×2 samples".into()));
        }
        let covers = |r: [f64; 2]| r[0] <= -MAP_BOUND && r[1] >= MAP_BOUND;
        if !covers(x_range) || !covers(y_range) {
            return Err(DpfrlError::Parse(format!(
                "reward grid {x_range:?} × {y_range:?} does not cover [-10, 10]²"
            )));
        }
        let mut values = Vec::with_capacity(nx * ny);
        for _ in 0..nx * ny {
            let v = float(next("value")?)?;
            if !v.is_finite() {
                return Err(DpfrlError::Parse("reward grid contains a non-finite value".into()));
            }
            values.push(v);
        }
        if tokens.next().is_some() {
            return Err(DpfrlError::Parse(format!("reward grid has more than {} values", nx * ny)));
        }
        Ok(GridMap {
            nx,
            ny,
            x_range,
            y_range,
            values,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DpfrlError::io(path, e))?;
        Self::parse(&text)
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let locate = |v: f64, r: [f64; 2], n: usize| {
            let f = ((v - r[0]) / (r[1] - r[0]) * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
            let i = (f.floor() as usize).min(n - 2);
            (i, f - i as f64)
        };
        let (i, fx) = locate(x, self.x_range, self.nx);
        let (j, fy) = locate(y, self.y_range, self.ny);
        let at = |i: usize, j: usize| self.values[j * self.nx + i];
        let lo = at(i, j) * (1.0 - fx) + at(i + 1, j) * fx;
        let hi = at(i, j + 1) * (1.0 - fx) + at(i + 1, j + 1) * fx;
        lo * (1.0 - fy) + hi * fy
    }
}

impl RewardMap {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            RewardMap::Bowl {
                goal,
                width,
                peak,
                floor,
            } => {
                let d2 = (x - goal[0]).powi(2) + (y - goal[1]).powi(2);
                peak * (-d2 / width).exp() + floor
            }
            RewardMap::Grid(g) => g.eval(x, y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HikeConfig {
    /// Length of the irrelevant noise vector.
    pub noise_len: usize,
    pub max_step: f64,
    pub start: [f64; 2],
    pub start_std: f64,
    pub transition_std: f64,
    pub observation_std: f64,
    pub noise_range: f64,
    pub episode_len: usize,
    pub action_cost: f64,
    pub reward_map: RewardMap,
    /// Noise toggles; all on for real runs.
    pub transition_noise: bool,
    pub observation_noise: bool,
    pub start_noise: bool,
}

impl Default for HikeConfig {
    fn default() -> Self {
        HikeConfig {
            noise_len: 0,
            max_step: 1.0,
            start: [-8.5, -8.5],
            start_std: 0.5,
            transition_std: 0.5,
            observation_std: 1.0,
            noise_range: 10.0,
            episode_len: 75,
            action_cost: 0.01,
            reward_map: RewardMap::default(),
            transition_noise: true,
            observation_noise: true,
            start_noise: true,
        }
    }
}

impl HikeConfig {
    pub fn obs_dim(&self) -> usize {
        2 + self.noise_len
    }

    /// Every noise source off.
    pub fn deterministic(mut self) -> Self {
        self.transition_noise = false;
        self.observation_noise = false;
        self.start_noise = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub position: [f64; 2],
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct MountainHike {
    cfg: HikeConfig,
    position: [f64; 2],
    t: usize,
    active: bool,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

impl MountainHike {
    pub fn new(cfg: HikeConfig) -> Self {
        MountainHike {
            position: cfg.start,
            cfg,
            t: 0,
            active: false,
        }
    }

    pub fn config(&self) -> &HikeConfig {
        &self.cfg
    }

    pub fn position(&self) -> [f64; 2] {
        self.position
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    fn observe(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.cfg.obs_dim());
        for &p in &self.position {
            let eps = if self.cfg.observation_noise {
                self.cfg.observation_std * normal(rng)
            } else {
                0.0
            };
            obs.push(p + eps);
        }
        let r = self.cfg.noise_range;
        obs.extend((0..self.cfg.noise_len).map(|_| rng.random_range(-r..r)));
        obs
    }

    /// Starts an episode; returns the first observation.
    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut p = self.cfg.start;
        if self.cfg.start_noise {
            for c in &mut p {
                *c += self.cfg.start_std * normal(rng);
            }
        }
        self.position = p.map(|c| c.clamp(-MAP_BOUND, MAP_BOUND));
        self.t = 0;
        self.active = true;
        self.observe(rng)
    }

    pub fn step(&mut self, action: [f64; 2], rng: &mut ChaCha8Rng) -> Result<StepResult> {
        if !self.active {
            return Err(DpfrlError::Env("step called on a finished or unstarted episode".into()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(DpfrlError::Env(format!("non-finite action {action:?}")));
        }
        for (p, a) in self.position.iter_mut().zip(action) {
            let eps = if self.cfg.transition_noise {
                self.cfg.transition_std * normal(rng)
            } else {
                0.0
            };
            *p = (*p + a + eps).clamp(-MAP_BOUND, MAP_BOUND);
        }
        self.t += 1;
        let observation = self.observe(rng);
        let norm = (action[0] * action[0] + action[1] * action[1]).sqrt();
        let reward = self.cfg.reward_map.eval(self.position[0], self.position[1]) - self.cfg.action_cost * norm;
        let done = self.t == self.cfg.episode_len;
        if done {
            self.active = false;
        }
        Ok(StepResult {
            position: self.position,
            observation,
            reward,
            done,
        })
    }
}

/// Maps an unbounded action to the env action: `tanh` per coordinate, then
/// scaled so the L2 norm is at most `max_step`.
pub fn squash_action(raw: [f64; 2], max_step: f64) -> [f64; 2] {
    let t = raw.map(f64::tanh);
    let norm = (t[0] * t[0] + t[1] * t[1]).sqrt();
    let s = max_step / norm.max(1.0);
    t.map(|c| c * s)
}

/// Output of one synchronous step of all instances.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct VecStep {
    /// Next observation per instance; the reset observation where `done`.
    pub observations: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Accumulated reward of every episode that ended this step.
    pub finished_returns: Vec<f64>,
}

/// `n` independent instances with per-instance random streams and auto-reset.
#[derive(Debug, Clone)]
pub struct VecEnv {
    envs: Vec<MountainHike>,
    returns: Vec<f64>,
    seed: u64,
    step: u64,
    pub parallel: bool,
}

impl VecEnv {
    pub fn new(cfg: HikeConfig, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(DpfrlError::Config("vector env needs at least one instance".into()));
        }
        Ok(VecEnv {
            envs: (0..n).map(|_| MountainHike::new(cfg.clone())).collect(),
            returns: vec![0.0; n],
            seed,
            step: 0,
            parallel: false,
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn envs(&self) -> &[MountainHike] {
        &self.envs
    }

    /// Number of synchronous steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn reset(&mut self) -> Vec<Vec<f64>> {
        let (seed, step) = (self.seed, self.step);
        self.returns.iter_mut().for_each(|r| *r = 0.0);
        self.envs
            .iter_mut()
            .enumerate()
            .map(|(i, env)| env.reset(&mut stream_rng(seed, Stream::EnvReset, i as u64, step)))
            .collect()
    }

    pub fn step(&mut self, actions: &[[f64; 2]]) -> Result<VecStep> {
        if actions.len() != self.envs.len() {
            return Err(DpfrlError::Env(format!(
                "{} actions for {} environments",
                actions.len(),
                self.envs.len()
            )));
        }
        let (seed, step) = (self.seed, self.step);
        let one = |(i, env): (usize, &mut MountainHike)| -> Result<(StepResult, Option<Vec<f64>>)> {
            let mut rng = stream_rng(seed, Stream::EnvStep, i as u64, step);
            let out = env.step(actions[i], &mut rng).map_err(|e| DpfrlError::Rollout {
                env: i,
                step,
                source: Box::new(e),
            })?;
            let reset = out
                .done
                .then(|| env.reset(&mut stream_rng(seed, Stream::EnvReset, i as u64, step + 1)));
            Ok((out, reset))
        };
        let results: Vec<_> = if self.parallel {
            self.envs.par_iter_mut().enumerate().map(one).collect::<Result<_>>()?
        } else {
            self.envs.iter_mut().enumerate().map(one).collect::<Result<_>>()?
        };
        self.step += 1;
        let mut out = VecStep {
            observations: Vec::with_capacity(results.len()),
            rewards: Vec::with_capacity(results.len()),
            dones: Vec::with_capacity(results.len()),
            finished_returns: Vec::new(),
        };
        for (i, (res, reset)) in results.into_iter().enumerate() {
            self.returns[i] += res.reward;
            if res.done {
                out.finished_returns.push(self.returns[i]);
                self.returns[i] = 0.0;
            }
            out.observations.push(reset.unwrap_or(res.observation));
            out.rewards.push(res.reward);
            out.dones.push(res.done);
        }
        Ok(out)
    }
}

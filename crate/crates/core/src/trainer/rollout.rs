use dpfrl_autodiff::{Scalar, Tape, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::belief::{ResampleRecord, StepNoise};
use crate::env::{squash_action, VecEnv, VecStep};
use crate::error::Result;
use crate::nets::{gaussian_entropy, gaussian_log_prob, Bound, Fwd, Memory, MemoryState, Model, ACTION_DIM};
use crate::rng::{stream_rng, Stream};

/// State carried from one rollout into the next (values only; the graph is cut here).
#[derive(Debug, Clone, PartialEq)]
pub struct Carry<T> {
    /// `None` until the first rollout builds the initial memory on its tape.
    pub memory: Option<MemoryState<T>>,
    /// Previous env action per env, zero after a reset; `E × 2` row-major.
    pub prev_action: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    /// Global step index of the next filter step.
    pub step: u64,
}

impl<T> Carry<T> {
    pub fn start(observations: Vec<Vec<f64>>) -> Self {
        Carry {
            memory: None,
            prev_action: vec![0.0; observations.len() * ACTION_DIM],
            observations,
            step: 0,
        }
    }

    pub fn envs(&self) -> usize {
        self.observations.len()
    }
}

/// Source of actions and transitions for [`unroll`].
pub trait RolloutDriver<T> {
    /// Raw (pre-squash) actions, `E × 2` row-major.
    fn act(&mut self, step: u64, mean: &[T], log_std: &[T]) -> Result<Vec<T>>;
    fn env_step(&mut self, actions: &[[f64; 2]]) -> Result<VecStep>;
}

/// Recorded actions and transitions of one rollout.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RolloutBatch {
    pub raw_actions: Vec<Vec<f64>>,
    pub steps: Vec<VecStep>,
}

/// Samples from the policy and steps real environments, recording both.
pub struct LiveDriver<'a> {
    pub env: &'a mut VecEnv,
    pub seed: u64,
    /// Take the mean action instead of sampling.
    pub greedy: bool,
    pub batch: RolloutBatch,
}

impl<'a> LiveDriver<'a> {
    pub fn new(env: &'a mut VecEnv, seed: u64, greedy: bool) -> Self {
        LiveDriver {
            env,
            seed,
            greedy,
            batch: RolloutBatch::default(),
        }
    }
}

impl<T: Scalar> RolloutDriver<T> for LiveDriver<'_> {
    fn act(&mut self, step: u64, mean: &[T], log_std: &[T]) -> Result<Vec<T>> {
        let envs = mean.len() / ACTION_DIM;
        let mut raw = Vec::with_capacity(mean.len());
        for e in 0..envs {
            let mut rng = stream_rng(self.seed, Stream::Action, e as u64, step);
            for d in 0..ACTION_DIM {
                let mu = mean[e * ACTION_DIM + d].as_f64();
                let a = if self.greedy {
                    mu
                } else {
                    mu + log_std[d].as_f64().exp() * rng.sample::<f64, _>(StandardNormal)
                };
                raw.push(T::from_f64_lossy(a));
            }
        }
        self.batch.raw_actions.push(raw.iter().map(|x| x.as_f64()).collect());
        Ok(raw)
    }

    fn env_step(&mut self, actions: &[[f64; 2]]) -> Result<VecStep> {
        let out = self.env.step(actions)?;
        self.batch.steps.push(out.clone());
        Ok(out)
    }
}

/// Replays a recorded batch.
pub struct ReplayDriver {
    batch: RolloutBatch,
    t_act: usize,
    t_env: usize,
}

impl ReplayDriver {
    pub fn new(batch: RolloutBatch) -> Self {
        ReplayDriver {
            batch,
            t_act: 0,
            t_env: 0,
        }
    }
}

impl<T: Scalar> RolloutDriver<T> for ReplayDriver {
    fn act(&mut self, _: u64, _: &[T], _: &[T]) -> Result<Vec<T>> {
        let raw = self.batch.raw_actions.get(self.t_act).ok_or_else(|| {
            crate::DpfrlError::Config("replay ran past the recorded actions".into())
        })?;
        self.t_act += 1;
        Ok(raw.iter().map(|&x| T::from_f64_lossy(x)).collect())
    }

    fn env_step(&mut self, _: &[[f64; 2]]) -> Result<VecStep> {
        let out = self.batch.steps.get(self.t_env).cloned().ok_or_else(|| {
            crate::DpfrlError::Config("replay ran past the recorded transitions".into())
        })?;
        self.t_env += 1;
        Ok(out)
    }
}

/// Tape-connected outputs of an `n`-step rollout.
#[derive(Debug, Clone)]
pub struct Unrolled {
    /// Per step, `E × 1`.
    pub log_probs: Vec<Var>,
    /// Per step, `E × 1`.
    pub values: Vec<Var>,
    /// Policy entropy, `1 × 1` (the log-std is state independent).
    pub entropy: Var,
    /// `[t][e]`
    pub rewards: Vec<Vec<f64>>,
    pub dones: Vec<Vec<bool>>,
    /// Detached value of the state after the last step, per env.
    pub bootstrap: Vec<f64>,
    pub finished_returns: Vec<f64>,
    /// Memory after the last env step (reset where an episode ended).
    pub last_memory: Memory,
}

fn to_t<T: Scalar>(v: impl IntoIterator<Item = f64>) -> Vec<T> {
    v.into_iter().map(T::from_f64_lossy).collect()
}

fn obs_var<T: Scalar>(tape: &mut Tape<T>, obs: &[Vec<f64>]) -> Result<Var> {
    let d = obs[0].len();
    Ok(tape.constant(to_t(obs.iter().flatten().copied()), &[obs.len(), d])?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOpts {
    pub n_steps: usize,
    pub filter_noise: bool,
    pub max_step: f64,
    /// Compute the detached bootstrap value after the last step.
    pub bootstrap: bool,
}

/// Runs `n_steps` filter + policy + env steps from `carry` on `tape`.
///
/// The bootstrap value reuses the noise keys of the next rollout's first step,
/// so it matches what that step computes before the parameters change.
#[allow(clippy::too_many_arguments)]
pub fn unroll<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    b: &Bound,
    fwd: &mut Fwd<'_, T>,
    carry: &Carry<T>,
    opts: &RolloutOpts,
    driver: &mut dyn RolloutDriver<T>,
    record: &mut ResampleRecord,
) -> Result<(Unrolled, Carry<T>)> {
    let envs = carry.envs();
    let seed = model.cfg.seed;
    let RolloutOpts {
        n_steps: n,
        filter_noise,
        max_step,
        bootstrap,
    } = *opts;
    let mut mem = match &carry.memory {
        Some(m) => m.to_tape(tape)?,
        None => model.initial_memory(tape, b, envs, &StepNoise::new(seed, carry.step, filter_noise))?,
    };
    let mut obs = carry.observations.clone();
    let mut prev = carry.prev_action.clone();
    let mut out = Unrolled {
        log_probs: Vec::with_capacity(n),
        values: Vec::with_capacity(n),
        entropy: tape.scalar(T::zero()),
        rewards: Vec::with_capacity(n),
        dones: Vec::with_capacity(n),
        bootstrap: Vec::new(),
        finished_returns: Vec::new(),
        last_memory: mem,
    };
    for t in 0..n {
        let s = carry.step + t as u64;
        let noise = StepNoise::new(seed, s, filter_noise);
        let o = obs_var(tape, &obs)?;
        let pa = tape.constant(to_t(prev.iter().copied()), &[envs, ACTION_DIM])?;
        let (m, feats) = model.step(tape, b, fwd, mem, o, pa, &noise, record)?;
        let pol = model.policy(tape, b, feats)?;
        let raw = driver.act(s, tape.value(pol.mean), tape.value(pol.log_std))?;
        let raw_f: Vec<f64> = raw.iter().map(|x| x.as_f64()).collect();
        let a = tape.constant(raw, &[envs, ACTION_DIM])?;
        out.log_probs.push(gaussian_log_prob(tape, pol.mean, pol.log_std, a)?);
        out.values.push(pol.value);
        if t == 0 {
            out.entropy = gaussian_entropy(tape, pol.log_std)?;
        }
        let env_actions: Vec<[f64; 2]> = raw_f
            .chunks(ACTION_DIM)
            .map(|c| squash_action([c[0], c[1]], max_step))
            .collect();
        let vs = driver.env_step(&env_actions)?;
        prev = env_actions
            .iter()
            .zip(&vs.dones)
            .flat_map(|(a, &d)| if d { [0.0; 2] } else { *a })
            .collect();
        mem = model.reset_memory(tape, b, m, &vs.dones, &StepNoise::new(seed, s + 1, filter_noise))?;
        obs = vs.observations;
        out.rewards.push(vs.rewards);
        out.dones.push(vs.dones);
        out.finished_returns.extend(vs.finished_returns);
    }
    out.last_memory = mem;

    let s = carry.step + n as u64;
    let next = Carry {
        memory: Some(MemoryState::read(tape, &mem)),
        prev_action: prev.clone(),
        observations: obs.clone(),
        step: s,
    };
    if !bootstrap {
        return Ok((out, next));
    }
    let mut boot_fwd = Fwd::new(fwd.mode, &model.running);
    let o = obs_var(tape, &obs)?;
    let pa = tape.constant(to_t(prev.iter().copied()), &[envs, ACTION_DIM])?;
    let noise = StepNoise::new(seed, s, filter_noise);
    let (_, feats) = model.step(tape, b, &mut boot_fwd, mem, o, pa, &noise, record)?;
    let pol = model.policy(tape, b, feats)?;
    out.bootstrap = tape.value(pol.value).iter().map(|v| v.as_f64()).collect();
    Ok((out, next))
}

/// `R_t = r_t + γ·(1 − done_t)·R_{t+1}`, seeded with the bootstrap value; `[t][e]`.
pub fn compute_returns(rewards: &[Vec<f64>], dones: &[Vec<bool>], bootstrap: &[f64], gamma: f64) -> Vec<Vec<f64>> {
    let mut next = bootstrap.to_vec();
    let mut out = vec![Vec::new(); rewards.len()];
    for t in (0..rewards.len()).rev() {
        let r: Vec<f64> = rewards[t]
            .iter()
            .zip(&dones[t])
            .zip(&next)
            .map(|((&r, &d), &n)| r + if d { 0.0 } else { gamma * n })
            .collect();
        next = r.clone();
        out[t] = r;
    }
    out
}

/// Loss terms; `total = policy + λ_V·value + λ_H·entropy`.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    /// Mean negative entropy.
    pub entropy: Var,
}

/// Standard A2C loss over all `(e, t)`; advantages use detached values.
pub fn a2c_loss<T: Scalar>(
    tape: &mut Tape<T>,
    log_probs: &[Var],
    values: &[Var],
    entropy: Var,
    returns: &[Vec<f64>],
    value_coef: f64,
    entropy_coef: f64,
) -> Result<LossParts> {
    a2c_loss_with(tape, log_probs, values, entropy, returns, None, value_coef, entropy_coef)
}

/// [`a2c_loss`] with the advantages optionally supplied as constants (`[t][e]`).
///
/// Detaching is not a property of the loss as a function of the parameters,
/// so finite-difference checks pin the advantages to their values at the
/// unperturbed point instead.
#[allow(clippy::too_many_arguments)]
pub fn a2c_loss_with<T: Scalar>(
    tape: &mut Tape<T>,
    log_probs: &[Var],
    values: &[Var],
    entropy: Var,
    returns: &[Vec<f64>],
    advantages: Option<&[Vec<f64>]>,
    value_coef: f64,
    entropy_coef: f64,
) -> Result<LossParts> {
    let lp = tape.concat(log_probs, 0)?;
    let v = tape.concat(values, 0)?;
    let rows = tape.shape(v)[0];
    let r = tape.constant(to_t(returns.iter().flatten().copied()), &[rows, 1])?;
    let adv = match advantages {
        Some(a) => tape.constant(to_t(a.iter().flatten().copied()), &[rows, 1])?,
        None => {
            let v_const = tape.detach(v);
            tape.sub(r, v_const)?
        }
    };
    let pg = tape.mul(lp, adv)?;
    let pg = tape.mean_all(pg);
    let policy = tape.neg(pg);
    let err = tape.sub(r, v)?;
    let sq = tape.square(err);
    let value = tape.mean_all(sq);
    let ent = tape.mean_all(entropy);
    let neg_ent = tape.neg(ent);
    let vterm = tape.scale(value, T::from_f64_lossy(value_coef));
    let eterm = tape.scale(neg_ent, T::from_f64_lossy(entropy_coef));
    let total = tape.add(policy, vterm)?;
    let total = tape.add(total, eterm)?;
    Ok(LossParts {
        total,
        policy,
        value,
        entropy: neg_ent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn returns_without_discount() {
        let r = compute_returns(&[vec![1.0], vec![1.0], vec![1.0]], &vec![vec![false]; 3], &[0.0], 1.0);
        assert_eq!(r, vec![vec![3.0], vec![2.0], vec![1.0]]);
    }

    #[test]
    fn done_cuts_bootstrap() {
        let r = compute_returns(&[vec![1.0], vec![1.0]], &[vec![true], vec![false]], &[5.0], 0.99);
        assert_eq!(r[0][0], 1.0);
        assert!((r[1][0] - 5.95).abs() < 1e-12);
    }

    #[test]
    fn zero_gamma_returns_rewards() {
        let rewards = vec![vec![0.3, -1.0], vec![2.0, 0.5]];
        let r = compute_returns(&rewards, &[vec![false, true], vec![false, false]], &[9.0, 9.0], 0.0);
        assert_eq!(r, rewards);
    }

    fn loss_of(lp: f64, v: f64, ret: f64, ent_log_std: [f64; 2]) -> (f64, f64, f64) {
        let mut t = Tape::<f64>::new();
        let lpv = t.param(vec![lp], &[1, 1]).unwrap();
        let vv = t.param(vec![v], &[1, 1]).unwrap();
        let ls = t.constant(ent_log_std.to_vec(), &[1, 2]).unwrap();
        let ent = gaussian_entropy(&mut t, ls).unwrap();
        let l = a2c_loss(&mut t, &[lpv], &[vv], ent, &[vec![ret]], 0.5, 0.01).unwrap();
        (t.item(l.total), t.item(l.policy), t.item(l.value))
    }

    #[test]
    fn hand_evaluated_loss() {
        let (total, pol, val) = loss_of(-1.0, 0.0, 1.0, [0.0, 0.0]);
        let entropy = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert_eq!(pol, 1.0);
        assert_eq!(val, 1.0);
        assert!((total - (1.5 - 0.01 * entropy)).abs() < 1e-12);
        assert!((total - 1.4716).abs() < 1e-4);
    }

    #[test]
    fn zero_advantage_and_exact_values() {
        let (_, pol, val) = loss_of(-3.0, 2.0, 2.0, [0.1, 0.2]);
        assert_eq!(pol, 0.0);
        assert_eq!(val, 0.0);
    }

    #[test]
    fn policy_term_does_not_reach_value() {
        let mut t = Tape::<f64>::new();
        let lp = t.param(vec![-1.0, -2.0], &[2, 1]).unwrap();
        let v = t.param(vec![0.5, 0.1], &[2, 1]).unwrap();
        let ls = t.constant(vec![0.0, 0.0], &[1, 2]).unwrap();
        let ent = gaussian_entropy(&mut t, ls).unwrap();
        let l = a2c_loss(&mut t, &[lp], &[v], ent, &[vec![1.0, 2.0]], 0.5, 0.01).unwrap();
        t.backward(l.policy).unwrap();
        assert!(t.grad(v).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
        assert!(t.grad(lp).is_some());
    }
}

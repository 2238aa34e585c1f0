//! Particle belief and its differentiable update.
//!
//! A belief for `E` parallel environments holds `E·K` latent particles as one
//! `(E·K) × H` tensor (env-major) and their log-weights as an `E × K` tensor.
//! Weights stay normalized per environment after every operation that
//! touches them.

use std::io::Write;

use dpfrl_autodiff::{Scalar, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DpfrlError, Result};
use crate::rng::{stream_rng, Stream};

/// Clamp applied to the log of each MGF value before exponentiation.
pub const MGF_LOG_CLAMP: f64 = 30.0;
/// Standard deviation of the noise added to `h₀` when a belief is (re)initialized.
pub const INIT_NOISE_STD: f64 = 0.1;

/// Keys of the random streams consumed by one filter step.
#[derive(Debug, Clone, Copy)]
pub struct StepNoise {
    pub seed: u64,
    pub step: u64,
    /// When false the transition noise is zero and initial particles are not jittered.
    pub stochastic: bool,
}

impl StepNoise {
    pub fn new(seed: u64, step: u64, stochastic: bool) -> Self {
        StepNoise {
            seed,
            step,
            stochastic,
        }
    }

    pub fn rng(&self, kind: Stream, env: usize) -> ChaCha8Rng {
        stream_rng(self.seed, kind, env as u64, self.step)
    }
}

/// Log of resampling indices, replayable so a graph can be rebuilt with the
/// same discrete choices (finite-difference checks perturb weights, which
/// must not flip sampled indices).
#[derive(Debug, Clone, Default)]
pub struct ResampleRecord {
    calls: Vec<Vec<Vec<usize>>>,
    cursor: Option<usize>,
}

impl ResampleRecord {
    pub fn new() -> Self {
        Self::default()
    }

    /// Switches to replay mode from the first recorded call.
    pub fn replay(&mut self) {
        self.cursor = Some(0);
    }

    pub fn calls(&self) -> usize {
        self.calls.len()
    }

    fn next(&mut self, sample: impl FnOnce() -> Vec<Vec<usize>>) -> Result<Vec<Vec<usize>>> {
        match &mut self.cursor {
            Some(c) => {
                let out = self.calls.get(*c).cloned().ok_or_else(|| {
                    DpfrlError::Config("resample replay ran past the recorded calls".into())
                })?;
                *c += 1;
                Ok(out)
            }
            None => {
                let out = sample();
                self.calls.push(out.clone());
                Ok(out)
            }
        }
    }
}

/// Weighted particle set on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ParticleBelief {
    /// `(E·K) × H`
    pub particles: Var,
    /// `E × K`, normalized per row in log-space
    pub log_weights: Var,
    pub envs: usize,
    pub k: usize,
    pub h: usize,
}

/// Off-tape copy of a belief, used to carry state across truncation boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState<T> {
    pub particles: Vec<T>,
    pub log_weights: Vec<T>,
    pub envs: usize,
    pub k: usize,
    pub h: usize,
}

impl<T: Scalar> BeliefState<T> {
    pub fn read(tape: &Tape<T>, b: &ParticleBelief) -> Self {
        BeliefState {
            particles: tape.value(b.particles).to_vec(),
            log_weights: tape.value(b.log_weights).to_vec(),
            envs: b.envs,
            k: b.k,
            h: b.h,
        }
    }

    /// Places the values on `tape` as constants.
    pub fn to_tape(&self, tape: &mut Tape<T>) -> Result<ParticleBelief> {
        Ok(ParticleBelief {
            particles: tape.constant(self.particles.clone(), &[self.envs * self.k, self.h])?,
            log_weights: tape.constant(self.log_weights.clone(), &[self.envs, self.k])?,
            envs: self.envs,
            k: self.k,
            h: self.h,
        })
    }

    pub fn env_particles(&self, env: usize) -> &[T] {
        let n = self.k * self.h;
        &self.particles[env * n..(env + 1) * n]
    }

    pub fn env_log_weights(&self, env: usize) -> &[T] {
        &self.log_weights[env * self.k..(env + 1) * self.k]
    }
}

/// Belief summary fed to the policy and value heads.
#[derive(Debug, Clone, Copy)]
pub struct BeliefFeatures {
    /// `E × H`
    pub mean: Var,
    /// `E × m`, absent when only the mean is used
    pub mgf: Option<Var>,
}

impl BeliefFeatures {
    /// `[mean, mgf]` concatenated along the feature axis.
    pub fn concat<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        Ok(match self.mgf {
            Some(m) => tape.concat(&[self.mean, m], 1)?,
            None => self.mean,
        })
    }
}

/// Weights of a gated recurrent cell with the input projection split from the
/// hidden projection, `W[h, x] = h·W_h + x·W_x`.
#[derive(Debug, Clone, Copy)]
pub struct CellVars {
    /// `H × 2H`, update gate `z` then reset gate `r`
    pub gates_h: Var,
    /// `X × 2H`
    pub gates_x: Var,
    /// `2H`
    pub gates_b: Var,
    pub cand_h: Var,
    pub cand_x: Var,
    pub cand_b: Var,
    /// Learned variance head of the stochastic cell.
    pub var: Option<AffineVars>,
}

/// `y = h·W_h + x·W_x + b`
#[derive(Debug, Clone, Copy)]
pub struct AffineVars {
    pub w_h: Var,
    pub w_x: Var,
    pub b: Var,
}

impl AffineVars {
    /// `h` has `E·K` rows, `x` has `E`; the input term is shared by each env's particles.
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, h: Var, x: Var, k: usize) -> Result<Var> {
        per_env_affine(tape, h, self.w_h, x, self.w_x, self.b, k)
    }
}

fn per_env_affine<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    w_h: Var,
    x: Var,
    w_x: Var,
    b: Var,
    k: usize,
) -> Result<Var> {
    let envs = tape.shape(x)[0];
    let hp = tape.matmul(h, w_h)?;
    let out = tape.shape(hp)[1];
    let xp = tape.matmul(x, w_x)?;
    let xp = tape.add(xp, b)?;
    let hp3 = tape.reshape(hp, &[envs, k, out])?;
    let xp3 = tape.reshape(xp, &[envs, 1, out])?;
    let sum = tape.add(hp3, xp3)?;
    Ok(tape.reshape(sum, &[envs * k, out])?)
}

/// One gated update of every row of `h` (`E·K × H`) given per-env input `x` (`E × X`).
///
/// `z, r = σ(W_{z,r}[h, x] + b)`, `n = W_n[r∘h, x] + b_n (+ ε)`,
/// `h' = (1 − z)∘tanh(n) + z∘h`. With `noise = None` or without a variance
/// head the cell is the deterministic GRU update.
pub fn gated_update<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    x: Var,
    cell: &CellVars,
    k: usize,
    sigma_min: T,
    noise: Option<&StepNoise>,
) -> Result<Var> {
    let hd = tape.shape(h)[1];
    let envs = tape.shape(x)[0];
    let gates = per_env_affine(tape, h, cell.gates_h, x, cell.gates_x, cell.gates_b, k)?;
    let gates = tape.sigmoid(gates);
    let z = tape.slice(gates, 1, 0, hd)?;
    let r = tape.slice(gates, 1, hd, hd)?;
    let rh = tape.mul(r, h)?;
    let mut n = per_env_affine(tape, rh, cell.cand_h, x, cell.cand_x, cell.cand_b, k)?;
    if let (Some(var), Some(noise)) = (cell.var.as_ref(), noise) {
        if noise.stochastic {
            let raw = var.apply(tape, h, x, k)?;
            let sp = tape.softplus(raw);
            let variance = tape.add_scalar(sp, sigma_min);
            let log_var = tape.log(variance)?;
            let mut eps = Vec::with_capacity(envs * k * hd);
            for e in 0..envs {
                let mut rng = noise.rng(Stream::Transition, e);
                eps.extend((0..k * hd).map(|_| {
                    T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal))
                }));
            }
            n = tape.gaussian_sample_with(n, log_var, eps)?;
        }
    }
    let cand = tape.tanh(n);
    // (1 − z)∘c + z∘h = c + z∘(h − c)
    let diff = tape.sub(h, cand)?;
    let zd = tape.mul(z, diff)?;
    Ok(tape.add(cand, zd)?)
}

fn check(tape: &Tape<impl Scalar>, v: Var, step: u64, what: &str) -> Result<()> {
    tape.check_finite(v, what).map_err(|e| DpfrlError::Filter {
        step,
        detail: e.to_string(),
    })
}

/// `K` copies of the learned initial vector `h₀` per env, jittered by N(0, 0.1²)
/// when `noise.stochastic`, with uniform log-weights `−ln K`.
pub fn init_belief<T: Scalar>(
    tape: &mut Tape<T>,
    h0: Var,
    k: usize,
    envs: usize,
    noise: &StepNoise,
) -> Result<ParticleBelief> {
    if k == 0 || envs == 0 {
        return Err(DpfrlError::Config("belief needs K ≥ 1 and at least one env".into()));
    }
    let h = tape.numel(h0);
    let base = tape.reshape(h0, &[1, h])?;
    let mut jitter = Vec::with_capacity(envs * k * h);
    for e in 0..envs {
        if noise.stochastic {
            let mut rng = noise.rng(Stream::BeliefInit, e);
            jitter.extend((0..k * h).map(|_| {
                T::from_f64_lossy(INIT_NOISE_STD * rng.sample::<f64, _>(StandardNormal))
            }));
        } else {
            jitter.extend(std::iter::repeat_n(T::zero(), k * h));
        }
    }
    let jitter = tape.constant(jitter, &[envs * k, h])?;
    let particles = tape.add(jitter, base)?;
    let lw = T::from_f64_lossy(-(k as f64).ln());
    let log_weights = tape.constant(vec![lw; envs * k], &[envs, k])?;
    Ok(ParticleBelief {
        particles,
        log_weights,
        envs,
        k,
        h,
    })
}

/// Observation-conditioned stochastic transition of every particle; weights untouched.
pub fn transition_update<T: Scalar>(
    tape: &mut Tape<T>,
    belief: &ParticleBelief,
    x: Var,
    cell: &CellVars,
    sigma_min: T,
    noise: &StepNoise,
) -> Result<ParticleBelief> {
    let particles = gated_update(
        tape,
        belief.particles,
        x,
        cell,
        belief.k,
        sigma_min,
        Some(noise),
    )?;
    check(tape, particles, noise.step, "transition output")?;
    Ok(ParticleBelief {
        particles,
        ..*belief
    })
}

/// Compatibility logits `W_o[h, o] + b_o`, shape `E × K`.
pub fn compatibility_logits<T: Scalar>(
    tape: &mut Tape<T>,
    belief: &ParticleBelief,
    obs_encoding: Var,
    head: &AffineVars,
) -> Result<Var> {
    let logits = head.apply(tape, belief.particles, obs_encoding, belief.k)?;
    Ok(tape.reshape(logits, &[belief.envs, belief.k])?)
}

/// `log w'ᵢ = log wᵢ + ℓᵢ − logsumexp_j(log w_j + ℓ_j)` per env.
pub fn reweight_with_logits<T: Scalar>(
    tape: &mut Tape<T>,
    belief: &ParticleBelief,
    logits: Var,
    step: u64,
) -> Result<ParticleBelief> {
    check(tape, logits, step, "observation logits")?;
    let logits = tape.reshape(logits, &[belief.envs, belief.k])?;
    let unnorm = tape.add(belief.log_weights, logits)?;
    let log_weights = normalize_log_weights(tape, unnorm)?;
    check(tape, log_weights, step, "reweighted log-weights")?;
    Ok(ParticleBelief {
        log_weights,
        ..*belief
    })
}

/// Discriminative importance reweighting with the compatibility head.
pub fn reweight<T: Scalar>(
    tape: &mut Tape<T>,
    belief: &ParticleBelief,
    obs_encoding: Var,
    head: &AffineVars,
    step: u64,
) -> Result<ParticleBelief> {
    let logits = compatibility_logits(tape, belief, obs_encoding, head)?;
    reweight_with_logits(tape, belief, logits, step)
}

fn normalize_log_weights<T: Scalar>(tape: &mut Tape<T>, lw: Var) -> Result<Var> {
    let lse = tape.logsumexp(lw, 1)?;
    Ok(tape.sub(lw, lse)?)
}

/// Inverse-CDF draw of `uniforms.len()` indices from `q(i) = α·wᵢ + (1 − α)/K`.
pub fn sample_indices(weights: &[f64], alpha: f64, uniforms: &[f64]) -> Vec<usize> {
    let k = weights.len();
    let uniform = (1.0 - alpha) / k as f64;
    let mut cdf = Vec::with_capacity(k);
    let mut acc = 0.0;
    for &w in weights {
        acc += alpha * w + uniform;
        cdf.push(acc);
    }
    uniforms
        .iter()
        .map(|&u| {
            let target = u * acc;
            cdf.iter().position(|&c| target < c).unwrap_or(k - 1)
        })
        .collect()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(DpfrlError::Config(format!("soft-resampling alpha {alpha} outside [0, 1]")))
    }
}

/// Soft-resampling with indices drawn from each env's resample stream.
pub fn soft_resample<T: Scalar>(
    tape: &mut Tape<T>,
    belief: &ParticleBelief,
    alpha: f64,
    noise: &StepNoise,
    record: &mut ResampleRecord,
) -> Result<ParticleBelief> {
    check_alpha(alpha)?;
    let lw = tape.value(belief.log_weights).to_vec();
    let indices = record.next(|| {
        (0..belief.envs)
            .map(|e| {
                let w: Vec<f64> = lw[e * belief.k..(e + 1) * belief.k]
                    .iter()
                    .map(|x| x.as_f64().exp())
                    .collect();
                let mut rng = noise.rng(Stream::Resample, e);
                let u: Vec<f64> = (0..belief.k).map(|_| rng.random::<f64>()).collect();
                sample_indices(&w, alpha, &u)
            })
            .collect()
    })?;
    soft_resample_with_indices(tape, belief, alpha, &indices)
}

/// Soft-resampling with given per-env indices.
///
/// Particle `j` copies `h_{idx(j)}`; its weight is `w_{idx(j)} / q(idx(j))`,
/// renormalized in log-space. Gradients flow through the copied particles and
/// the weight ratio; the index choice itself is not differentiated.
pub fn soft_resample_with_indices<T: Scalar>(
    tape: &mut Tape<T>,
    belief: &ParticleBelief,
    alpha: f64,
    indices: &[Vec<usize>],
) -> Result<ParticleBelief> {
    check_alpha(alpha)?;
    let (envs, k) = (belief.envs, belief.k);
    if indices.len() != envs || indices.iter().any(|ix| ix.len() != k || ix.iter().any(|&i| i >= k)) {
        return Err(DpfrlError::Config(format!(
            "resample indices must be {envs} lists of {k} indices below {k}"
        )));
    }
    let global: Vec<usize> = indices
        .iter()
        .enumerate()
        .flat_map(|(e, ix)| ix.iter().map(move |&i| e * k + i))
        .collect();
    let particles = tape.gather_rows(belief.particles, &global)?;
    let flat = tape.reshape(belief.log_weights, &[envs * k, 1])?;
    let picked = tape.gather_rows(flat, &global)?;
    let picked = tape.reshape(picked, &[envs, k])?;
    let w = tape.exp(picked);
    let aw = tape.scale(w, T::from_f64_lossy(alpha));
    let q = tape.add_scalar(aw, T::from_f64_lossy((1.0 - alpha) / k as f64));
    let log_q = tape.log(q)?;
    let ratio = tape.sub(picked, log_q)?;
    let log_weights = normalize_log_weights(tape, ratio)?;
    Ok(ParticleBelief {
        particles,
        log_weights,
        ..*belief
    })
}

/// Weighted mean particle `Σᵢ wᵢ hᵢ`, shape `E × H`.
pub fn mean_particle<T: Scalar>(tape: &mut Tape<T>, belief: &ParticleBelief) -> Result<Var> {
    let (envs, k, h) = (belief.envs, belief.k, belief.h);
    let w = tape.exp(belief.log_weights);
    let w = tape.reshape(w, &[envs, k, 1])?;
    let p = tape.reshape(belief.particles, &[envs, k, h])?;
    let wp = tape.mul(w, p)?;
    let s = tape.sum(wp, 1)?;
    Ok(tape.reshape(s, &[envs, h])?)
}

/// Mean particle plus MGF values `M_j = Σᵢ wᵢ exp(⟨v_j, hᵢ⟩)` at the rows of `locations` (`m × H`).
///
/// Computed as `exp(min(logsumexp_i(log wᵢ + ⟨v_j, hᵢ⟩), 30))`.
pub fn mgf_features<T: Scalar>(
    tape: &mut Tape<T>,
    belief: &ParticleBelief,
    locations: Var,
) -> Result<BeliefFeatures> {
    let mean = mean_particle(tape, belief)?;
    let mgf = mgf_values(tape, belief, locations)?;
    Ok(BeliefFeatures {
        mean,
        mgf: Some(mgf),
    })
}

pub fn mgf_values<T: Scalar>(tape: &mut Tape<T>, belief: &ParticleBelief, locations: Var) -> Result<Var> {
    let (envs, k) = (belief.envs, belief.k);
    let m = tape.shape(locations)[0];
    let vt = tape.transpose(locations)?;
    let proj = tape.matmul(belief.particles, vt)?;
    let proj = tape.reshape(proj, &[envs, k, m])?;
    let lw = tape.reshape(belief.log_weights, &[envs, k, 1])?;
    let terms = tape.add(proj, lw)?;
    let log_m = tape.logsumexp(terms, 1)?;
    let log_m = tape.clamp(log_m, T::min_value(), T::from_f64_lossy(MGF_LOG_CLAMP))?;
    let mgf = tape.exp(log_m);
    Ok(tape.reshape(mgf, &[envs, m])?)
}

/// Appends one CSV row per particle: `env,step,particle,weight,h_0..h_{H−1}`.
pub fn write_particle_rows<T: Scalar, W: Write>(
    out: &mut W,
    state: &BeliefState<T>,
    step: u64,
) -> std::io::Result<()> {
    for e in 0..state.envs {
        let lw = state.env_log_weights(e);
        let ps = state.env_particles(e);
        for i in 0..state.k {
            write!(out, "{e},{step},{i},{}", lw[i].as_f64().exp())?;
            for v in &ps[i * state.h..(i + 1) * state.h] {
                write!(out, ",{}", v.as_f64())?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn particle_csv_header(h: usize) -> String {
    let mut s = String::from("env,step,particle,weight");
    for d in 0..h {
        s.push_str(&format!(",h_{d}"));
    }
    s
}

//! Parameterized networks: encoders, the particle cell, observation heads,
//! belief summaries and the actor-critic heads.

mod checkpoint;
mod params;

use std::fmt;
use std::str::FromStr;

use dpfrl_autodiff::{Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::belief::{
    self, AffineVars, BeliefFeatures, BeliefState, CellVars, ParticleBelief, ResampleRecord, StepNoise,
};
use crate::error::{DpfrlError, Result};

pub use checkpoint::{Checkpoint, NamedArray, NamedStats, CHECKPOINT_VERSION};
pub use params::{Bound, Fwd, Init, Mode, Param, ParamId, ParamStore, RunningStats, BN_EPS, BN_MOMENTUM};

pub const ACTION_DIM: usize = 2;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Added to the decoder's softplus scale in the generative observation model.
pub const DECODER_SIGMA_MIN: f64 = 1e-3;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Dpfrl,
    DpfrlMean,
    DpfrlGrumerge,
    DpfrlGenerative,
    Gru,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Dpfrl,
        Variant::DpfrlMean,
        Variant::DpfrlGrumerge,
        Variant::DpfrlGenerative,
        Variant::Gru,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Dpfrl => "dpfrl",
            Variant::DpfrlMean => "dpfrl-mean",
            Variant::DpfrlGrumerge => "dpfrl-grumerge",
            Variant::DpfrlGenerative => "dpfrl-generative",
            Variant::Gru => "gru",
        }
    }

    pub fn uses_particles(self) -> bool {
        self != Variant::Gru
    }

    pub fn uses_mgf(self) -> bool {
        matches!(self, Variant::Dpfrl | Variant::DpfrlGenerative)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = DpfrlError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.tag() == s).ok_or_else(|| {
            let tags: Vec<_> = Variant::ALL.iter().map(|v| v.tag()).collect();
            DpfrlError::Config(format!("unknown variant {s:?}; valid: {}", tags.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub obs_dim: usize,
    pub h: usize,
    pub k: usize,
    pub m: usize,
    pub enc_width: usize,
    pub act_width: usize,
    pub head_width: usize,
    pub sigma_min: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, obs_dim: usize, h: usize, k: usize, m: usize) -> Self {
        ModelConfig {
            variant,
            obs_dim,
            h,
            k,
            m,
            enc_width: 64,
            act_width: 64,
            head_width: 64,
            sigma_min: 1e-3,
            alpha: 0.9,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("obs_dim", self.obs_dim),
            ("H", self.h),
            ("K", self.k),
            ("enc_width", self.enc_width),
            ("act_width", self.act_width),
            ("head_width", self.head_width),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(DpfrlError::Config(format!("{name} must be at least 1")));
        }
        if self.variant.uses_mgf() && self.m == 0 {
            return Err(DpfrlError::Config(format!("variant {} needs m ≥ 1", self.variant)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DpfrlError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.sigma_min >= 0.0 && self.sigma_min.is_finite()) {
            return Err(DpfrlError::Config(format!("sigma_min {} must be ≥ 0", self.sigma_min)));
        }
        Ok(())
    }

    /// Width of the recurrent input `[obs encoding, action encoding]`.
    pub fn cell_input(&self) -> usize {
        self.enc_width + self.act_width
    }

    /// Width of the policy/value input.
    pub fn feature_dim(&self) -> usize {
        if self.variant.uses_mgf() {
            self.h + self.m
        } else {
            self.h
        }
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (d, h, w, a, q, m) = (
            self.obs_dim,
            self.h,
            self.enc_width,
            self.act_width,
            self.head_width,
            self.m,
        );
        let x = w + a;
        let v = self.variant;
        // affine + batch-norm scale/shift
        let norm_dense = |i: usize, o: usize| i * o + o + 2 * o;
        let gru = |input: usize| 3 * (h + input) * h + 3 * h;
        let mut n = norm_dense(d, w) + norm_dense(w, w) + norm_dense(ACTION_DIM, a) + gru(x);
        if v.uses_particles() {
            n += (h + x) * h + h; // variance head
            n += h; // h0
        }
        if matches!(v, Variant::Dpfrl | Variant::DpfrlMean | Variant::DpfrlGrumerge) {
            n += h + w + 1;
        }
        if v == Variant::DpfrlGenerative {
            n += norm_dense(h, w) + norm_dense(w, w) + w * 2 * d + 2 * d;
        }
        if v.uses_mgf() {
            n += m * h;
        }
        if v == Variant::DpfrlGrumerge {
            n += gru(h + 1);
        }
        let f = self.feature_dim();
        n += (f * q + q + q * ACTION_DIM + ACTION_DIM) + (f * q + q + q + 1);
        n + ACTION_DIM
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormDense {
    dense: Dense,
    gamma: ParamId,
    beta: ParamId,
    bn: usize,
}

#[derive(Debug, Clone, Copy)]
struct Affine2 {
    w_h: ParamId,
    w_x: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct CellIds {
    gates: Affine2,
    cand: Affine2,
    var: Option<Affine2>,
}

#[derive(Debug, Clone)]
struct Layout {
    obs_enc: [NormDense; 2],
    act_enc: NormDense,
    cell: CellIds,
    compat: Option<Affine2>,
    h0: Option<ParamId>,
    mgf: Option<ParamId>,
    decoder: Option<([NormDense; 2], Dense)>,
    merge: Option<CellIds>,
    actor: [Dense; 2],
    critic: [Dense; 2],
    log_std: ParamId,
}

struct Builder<'a, T> {
    params: &'a mut ParamStore<T>,
    bn: &'a mut Vec<RunningStats<T>>,
    seed: u64,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        self.params.add(name, shape, init, self.seed)
    }

    fn dense(&mut self, name: &str, i: usize, o: usize, gain: f64) -> Dense {
        Dense {
            w: self.add(&format!("{name}.w"), &[i, o], Init::Orthogonal(gain)),
            b: self.add(&format!("{name}.b"), &[o], Init::Zeros),
        }
    }

    fn norm_dense(&mut self, name: &str, i: usize, o: usize) -> NormDense {
        let dense = self.dense(name, i, o, 1.0);
        let gamma = self.add(&format!("{name}.bn.gamma"), &[o], Init::Ones);
        let beta = self.add(&format!("{name}.bn.beta"), &[o], Init::Zeros);
        self.bn.push(RunningStats::new(&format!("{name}.bn"), o));
        NormDense {
            dense,
            gamma,
            beta,
            bn: self.bn.len() - 1,
        }
    }

    fn affine2(&mut self, name: &str, h: usize, x: usize, o: usize) -> Affine2 {
        Affine2 {
            w_h: self.add(&format!("{name}.w_h"), &[h, o], Init::Orthogonal(1.0)),
            w_x: self.add(&format!("{name}.w_x"), &[x, o], Init::Orthogonal(1.0)),
            b: self.add(&format!("{name}.b"), &[o], Init::Zeros),
        }
    }

    fn cell(&mut self, name: &str, h: usize, x: usize, stochastic: bool) -> CellIds {
        CellIds {
            gates: self.affine2(&format!("{name}.gates"), h, x, 2 * h),
            cand: self.affine2(&format!("{name}.cand"), h, x, h),
            var: stochastic.then(|| self.affine2(&format!("{name}.var"), h, x, h)),
        }
    }
}

/// Recurrent memory on a tape.
#[derive(Debug, Clone, Copy)]
pub enum Memory {
    Particles(ParticleBelief),
    /// `E × H` hidden state of the GRU baseline.
    Hidden(Var),
}

/// Off-tape recurrent memory.
#[derive(Debug, Clone, PartialEq)]
pub enum MemoryState<T> {
    Particles(BeliefState<T>),
    Hidden { values: Vec<T>, envs: usize, h: usize },
}

impl<T: Scalar> MemoryState<T> {
    pub fn read(tape: &Tape<T>, mem: &Memory) -> Self {
        match mem {
            Memory::Particles(b) => MemoryState::Particles(BeliefState::read(tape, b)),
            Memory::Hidden(v) => {
                let s = tape.shape(*v);
                MemoryState::Hidden {
                    values: tape.value(*v).to_vec(),
                    envs: s[0],
                    h: s[1],
                }
            }
        }
    }

    pub fn to_tape(&self, tape: &mut Tape<T>) -> Result<Memory> {
        Ok(match self {
            MemoryState::Particles(b) => Memory::Particles(b.to_tape(tape)?),
            MemoryState::Hidden { values, envs, h } => Memory::Hidden(tape.constant(values.clone(), &[*envs, *h])?),
        })
    }
}

/// Policy and value for a batch of beliefs.
#[derive(Debug, Clone, Copy)]
pub struct PolicyOutput {
    /// `E × 2`
    pub mean: Var,
    /// `1 × 2`, clamped to `[−5, 2]`
    pub log_std: Var,
    /// `E × 1`
    pub value: Var,
}

/// Full model: parameters, running statistics and their layout.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub running: Vec<RunningStats<T>>,
    layout: Layout,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut running = Vec::new();
        let mut b = Builder {
            params: &mut params,
            bn: &mut running,
            seed: cfg.seed,
        };
        let (d, h, w, a, q) = (cfg.obs_dim, cfg.h, cfg.enc_width, cfg.act_width, cfg.head_width);
        let v = cfg.variant;
        let obs_enc = [b.norm_dense("obs_enc.0", d, w), b.norm_dense("obs_enc.1", w, w)];
        let act_enc = b.norm_dense("act_enc", ACTION_DIM, a);
        let cell = b.cell("cell", h, cfg.cell_input(), v.uses_particles());
        let h0 = v.uses_particles().then(|| b.add("h0", &[h], Init::Zeros));
        let compat = matches!(v, Variant::Dpfrl | Variant::DpfrlMean | Variant::DpfrlGrumerge)
            .then(|| b.affine2("compat", h, w, 1));
        let decoder = (v == Variant::DpfrlGenerative).then(|| {
            (
                [b.norm_dense("decoder.0", h, w), b.norm_dense("decoder.1", w, w)],
                b.dense("decoder.out", w, 2 * d, 1.0),
            )
        });
        let mgf = v
            .uses_mgf()
            .then(|| b.add("mgf.v", &[cfg.m, h], Init::Normal(1.0 / (h as f64).sqrt())));
        let merge = (v == Variant::DpfrlGrumerge).then(|| b.cell("merge", h, h + 1, false));
        let f = cfg.feature_dim();
        let actor = [b.dense("actor.0", f, q, 1.0), b.dense("actor.1", q, ACTION_DIM, 0.01)];
        let critic = [b.dense("critic.0", f, q, 1.0), b.dense("critic.1", q, 1, 1.0)];
        let log_std = b.add("log_std", &[ACTION_DIM], Init::Zeros);
        let layout = Layout {
            obs_enc,
            act_enc,
            cell,
            compat,
            h0,
            mgf,
            decoder,
            merge,
            actor,
            critic,
            log_std,
        };
        Ok(Model {
            cfg,
            params,
            running,
            layout,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Bound> {
        self.params.bind(tape, trainable)
    }

    pub fn fwd(&self, mode: Mode) -> Fwd<'_, T> {
        Fwd::new(mode, &self.running)
    }

    /// Folds train-mode batch statistics into the running averages, in order.
    pub fn apply_stats(&mut self, updates: Vec<(usize, dpfrl_autodiff::BatchStats<T>)>) {
        let momentum = T::from_f64_lossy(BN_MOMENTUM);
        for (layer, stats) in updates {
            self.running[layer].update(&stats, momentum);
        }
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    fn dense(&self, tape: &mut Tape<T>, b: &Bound, l: Dense, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b[l.w])?;
        Ok(tape.add(y, b[l.b])?)
    }

    fn norm_dense(&self, tape: &mut Tape<T>, b: &Bound, fwd: &mut Fwd<'_, T>, l: NormDense, x: Var) -> Result<Var> {
        let y = self.dense(tape, b, l.dense, x)?;
        let y = fwd.batch_norm(tape, y, b[l.gamma], b[l.beta], l.bn)?;
        Ok(tape.relu(y))
    }

    /// `E × (2 + l)` raw observations to `E × 64` encodings.
    pub fn encode_observation(&self, tape: &mut Tape<T>, b: &Bound, fwd: &mut Fwd<'_, T>, obs: Var) -> Result<Var> {
        let s = tape.shape(obs);
        if s.len() != 2 || s[1] != self.cfg.obs_dim {
            return Err(DpfrlError::Config(format!(
                "observation shape {s:?}, expected [E, {}]",
                self.cfg.obs_dim
            )));
        }
        let [l0, l1] = self.layout.obs_enc;
        let y = self.norm_dense(tape, b, fwd, l0, obs)?;
        self.norm_dense(tape, b, fwd, l1, y)
    }

    pub fn encode_action(&self, tape: &mut Tape<T>, b: &Bound, fwd: &mut Fwd<'_, T>, action: Var) -> Result<Var> {
        self.norm_dense(tape, b, fwd, self.layout.act_enc, action)
    }

    fn affine2(b: &Bound, ids: Affine2) -> AffineVars {
        AffineVars {
            w_h: b[ids.w_h],
            w_x: b[ids.w_x],
            b: b[ids.b],
        }
    }

    fn cell_vars(b: &Bound, ids: CellIds) -> CellVars {
        CellVars {
            gates_h: b[ids.gates.w_h],
            gates_x: b[ids.gates.w_x],
            gates_b: b[ids.gates.b],
            cand_h: b[ids.cand.w_h],
            cand_x: b[ids.cand.w_x],
            cand_b: b[ids.cand.b],
            var: ids.var.map(|v| Self::affine2(b, v)),
        }
    }

    /// Transition cell weights as bound on a tape.
    pub fn cell(&self, b: &Bound) -> CellVars {
        Self::cell_vars(b, self.layout.cell)
    }

    pub fn compat_head(&self, b: &Bound) -> Option<AffineVars> {
        self.layout.compat.map(|c| Self::affine2(b, c))
    }

    pub fn mgf_locations(&self, b: &Bound) -> Option<Var> {
        self.layout.mgf.map(|id| b[id])
    }

    pub fn sigma_min(&self) -> T {
        T::from_f64_lossy(self.cfg.sigma_min)
    }

    /// Fresh memory for `envs` environments.
    pub fn initial_memory(&self, tape: &mut Tape<T>, b: &Bound, envs: usize, noise: &StepNoise) -> Result<Memory> {
        match self.layout.h0 {
            Some(h0) => Ok(Memory::Particles(belief::init_belief(
                tape,
                b[h0],
                self.cfg.k,
                envs,
                noise,
            )?)),
            None => Ok(Memory::Hidden(tape.constant(vec![T::zero(); envs * self.cfg.h], &[envs, self.cfg.h])?)),
        }
    }

    /// Replaces the memory of every env with `reset[e]` by a fresh initialization.
    pub fn reset_memory(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        mem: Memory,
        reset: &[bool],
        noise: &StepNoise,
    ) -> Result<Memory> {
        if !reset.iter().any(|&r| r) {
            return Ok(mem);
        }
        let envs = reset.len();
        let fresh = self.initial_memory(tape, b, envs, noise)?;
        let rows_per_env = match mem {
            Memory::Particles(p) => p.k,
            Memory::Hidden(_) => 1,
        };
        let mask_rows = |tape: &mut Tape<T>, per: usize| -> Result<(Var, Var)> {
            let m: Vec<T> = reset
                .iter()
                .flat_map(|&r| std::iter::repeat_n(if r { T::one() } else { T::zero() }, per))
                .collect();
            let keep: Vec<T> = m.iter().map(|&x| T::one() - x).collect();
            Ok((tape.constant(m, &[envs * per, 1])?, tape.constant(keep, &[envs * per, 1])?))
        };
        let blend = |tape: &mut Tape<T>, new: Var, old: Var, mask: Var, keep: Var| -> Result<Var> {
            let a = tape.mul(new, mask)?;
            let c = tape.mul(old, keep)?;
            Ok(tape.add(a, c)?)
        };
        match (mem, fresh) {
            (Memory::Particles(old), Memory::Particles(new)) => {
                let (mask, keep) = mask_rows(tape, rows_per_env)?;
                let particles = blend(tape, new.particles, old.particles, mask, keep)?;
                let (mask, keep) = mask_rows(tape, 1)?;
                let log_weights = blend(tape, new.log_weights, old.log_weights, mask, keep)?;
                Ok(Memory::Particles(ParticleBelief {
                    particles,
                    log_weights,
                    ..old
                }))
            }
            (Memory::Hidden(old), Memory::Hidden(new)) => {
                let (mask, keep) = mask_rows(tape, 1)?;
                Ok(Memory::Hidden(blend(tape, new, old, mask, keep)?))
            }
            _ => unreachable!("memory kind is fixed by the variant"),
        }
    }

    /// Log-likelihood of the raw observation under a diagonal Gaussian decoded
    /// from each particle; `E × K`.
    pub fn generative_logit(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        fwd: &mut Fwd<'_, T>,
        particles: Var,
        obs: Var,
        k: usize,
    ) -> Result<Var> {
        let ([l0, l1], out) = self
            .layout
            .decoder
            .ok_or_else(|| DpfrlError::Config(format!("variant {} has no generative decoder", self.cfg.variant)))?;
        let d = self.cfg.obs_dim;
        let envs = tape.shape(obs)[0];
        let y = self.norm_dense(tape, b, fwd, l0, particles)?;
        let y = self.norm_dense(tape, b, fwd, l1, y)?;
        let y = self.dense(tape, b, out, y)?;
        let mu = tape.slice(y, 1, 0, d)?;
        let raw = tape.slice(y, 1, d, d)?;
        let sp = tape.softplus(raw);
        let sigma = tape.add_scalar(sp, T::from_f64_lossy(DECODER_SIGMA_MIN));
        let mu = tape.reshape(mu, &[envs, k, d])?;
        let sigma = tape.reshape(sigma, &[envs, k, d])?;
        let o = tape.reshape(obs, &[envs, 1, d])?;
        let ll = gaussian_log_density(tape, o, mu, sigma)?;
        let s = tape.sum(ll, 2)?;
        Ok(tape.reshape(s, &[envs, k])?)
    }

    /// A gated recurrence over `[hᵢ, wᵢ]` in particle order; its final state (`E × H`).
    pub fn gru_merge(&self, tape: &mut Tape<T>, b: &Bound, belief: &ParticleBelief) -> Result<Var> {
        let ids = self
            .layout
            .merge
            .ok_or_else(|| DpfrlError::Config(format!("variant {} has no merge recurrence", self.cfg.variant)))?;
        let cell = Self::cell_vars(b, ids);
        let (envs, k, h) = (belief.envs, belief.k, belief.h);
        let p3 = tape.reshape(belief.particles, &[envs, k, h])?;
        let w = tape.exp(belief.log_weights);
        let mut hidden = tape.constant(vec![T::zero(); envs * h], &[envs, h])?;
        for i in 0..k {
            let hi = tape.slice(p3, 1, i, 1)?;
            let hi = tape.reshape(hi, &[envs, h])?;
            let wi = tape.slice(w, 1, i, 1)?;
            let x = tape.concat(&[hi, wi], 1)?;
            hidden = belief::gated_update(tape, hidden, x, &cell, 1, T::zero(), None)?;
        }
        Ok(hidden)
    }

    /// Deterministic GRU update of the baseline's hidden state.
    pub fn gru_baseline_step(&self, tape: &mut Tape<T>, b: &Bound, hidden: Var, x: Var) -> Result<Var> {
        let cell = self.cell(b);
        belief::gated_update(tape, hidden, x, &cell, 1, T::zero(), None)
    }

    /// One filter step: encode, transition, reweight, soft-resample, summarize.
    /// Returns the new memory and the `E × F` policy input.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        fwd: &mut Fwd<'_, T>,
        mem: Memory,
        obs: Var,
        prev_action: Var,
        noise: &StepNoise,
        record: &mut ResampleRecord,
    ) -> Result<(Memory, Var)> {
        let obs_enc = self.encode_observation(tape, b, fwd, obs)?;
        let act_enc = self.encode_action(tape, b, fwd, prev_action)?;
        let x = tape.concat(&[obs_enc, act_enc], 1)?;
        match mem {
            Memory::Hidden(h) => {
                let h = self.gru_baseline_step(tape, b, h, x)?;
                Ok((Memory::Hidden(h), h))
            }
            Memory::Particles(p) => {
                let cell = self.cell(b);
                let p = belief::transition_update(tape, &p, x, &cell, self.sigma_min(), noise)?;
                let logits = match self.compat_head(b) {
                    Some(head) => belief::compatibility_logits(tape, &p, obs_enc, &head)?,
                    None => self.generative_logit(tape, b, fwd, p.particles, obs, p.k)?,
                };
                let p = belief::reweight_with_logits(tape, &p, logits, noise.step)?;
                let p = belief::soft_resample(tape, &p, self.cfg.alpha, noise, record)?;
                let feats = self.features(tape, b, &p)?;
                Ok((Memory::Particles(p), feats))
            }
        }
    }

    /// Belief summary used by the heads: `[mean, mgf]`, the mean alone, or the merge recurrence.
    pub fn features(&self, tape: &mut Tape<T>, b: &Bound, p: &ParticleBelief) -> Result<Var> {
        match self.cfg.variant {
            Variant::DpfrlGrumerge => self.gru_merge(tape, b, p),
            Variant::DpfrlMean => belief::mean_particle(tape, p),
            _ => {
                let v = self
                    .mgf_locations(b)
                    .ok_or_else(|| DpfrlError::Config("missing MGF locations".into()))?;
                let f: BeliefFeatures = belief::mgf_features(tape, p, v)?;
                f.concat(tape)
            }
        }
    }

    pub fn policy(&self, tape: &mut Tape<T>, b: &Bound, features: Var) -> Result<PolicyOutput> {
        let head = |tape: &mut Tape<T>, [l0, l1]: [Dense; 2]| -> Result<Var> {
            let y = self.dense(tape, b, l0, features)?;
            let y = tape.tanh(y);
            self.dense(tape, b, l1, y)
        };
        let mean = head(tape, self.layout.actor)?;
        let value = head(tape, self.layout.critic)?;
        let ls = tape.reshape(b[self.layout.log_std], &[1, ACTION_DIM])?;
        let log_std = tape.clamp(ls, T::from_f64_lossy(LOG_STD_MIN), T::from_f64_lossy(LOG_STD_MAX))?;
        Ok(PolicyOutput { mean, log_std, value })
    }
}

/// Elementwise `log N(x; μ, σ²)` with broadcasting.
pub fn gaussian_log_density<T: Scalar>(tape: &mut Tape<T>, x: Var, mu: Var, sigma: Var) -> Result<Var> {
    let diff = tape.sub(x, mu)?;
    let log_sigma = tape.log(sigma)?;
    let inv = tape.neg(log_sigma);
    let inv = tape.exp(inv);
    let z = tape.mul(diff, inv)?;
    let z2 = tape.square(z);
    let half = tape.scale(z2, T::from_f64_lossy(-0.5));
    let a = tape.sub(half, log_sigma)?;
    Ok(tape.add_scalar(a, T::from_f64_lossy(-0.5 * LN_2PI)))
}

/// `log π(a | b)` per row for a diagonal Gaussian with log-std shared across rows; `E × 1`.
pub fn gaussian_log_prob<T: Scalar>(tape: &mut Tape<T>, mean: Var, log_std: Var, action: Var) -> Result<Var> {
    let std = tape.exp(log_std);
    let ll = gaussian_log_density(tape, action, mean, std)?;
    Ok(tape.sum(ll, 1)?)
}

/// `Σ_d (½·ln(2πe) + log σ_d)`; `1 × 1`.
pub fn gaussian_entropy<T: Scalar>(tape: &mut Tape<T>, log_std: Var) -> Result<Var> {
    let s = tape.sum(log_std, 1)?;
    let d = tape.numel(log_std) as f64;
    Ok(tape.add_scalar(s, T::from_f64_lossy(0.5 * d * (LN_2PI + 1.0))))
}

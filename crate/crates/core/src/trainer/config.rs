use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{GridMap, HikeConfig, RewardMap};
use crate::error::{DpfrlError, Result};
use crate::nets::{Checkpoint, ModelConfig, Variant};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "DPFRL_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Flat run configuration. Every key is optional in the TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Length of the irrelevant noise vector in observations.
    pub noise_len: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "H")]
    pub h: usize,
    /// Number of MGF features.
    pub m: usize,
    pub alpha: f64,
    pub sigma_min: f64,
    pub envs: usize,
    pub n_steps: usize,
    pub gamma: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub clip: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub precision: Precision,
    /// Updates between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub max_step: f64,
    /// Optional reward grid file; the analytic bowl is used when empty.
    pub reward_map: Option<PathBuf>,
    pub filter_noise: bool,
    pub env_noise: bool,
    pub particle_dump: bool,
    pub parallel_envs: bool,
    pub enc_width: usize,
    pub act_width: usize,
    pub head_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Dpfrl,
            noise_len: 0,
            k: 30,
            h: 128,
            m: 3,
            alpha: 0.9,
            sigma_min: 1e-3,
            envs: 16,
            n_steps: 5,
            gamma: 0.99,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 1e-4,
            rms_alpha: 0.99,
            rms_eps: 1e-5,
            clip: 0.5,
            total_steps: 1_000_000,
            seed: 1,
            precision: Precision::F32,
            checkpoint_interval: 0,
            max_step: 1.0,
            reward_map: None,
            filter_noise: true,
            env_noise: true,
            particle_dump: false,
            parallel_envs: false,
            enc_width: 64,
            act_width: 64,
            head_width: 64,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| DpfrlError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DpfrlError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| DpfrlError::Config(format!("{}: {e}", path.display())))
    }

    /// The training config stored alongside a checkpoint's weights.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_value(ck.config.clone()).map_err(|e| DpfrlError::Checkpoint(format!("embedded config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `DPFRL_SEED` when set.
    pub fn with_env_overrides(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|e| DpfrlError::Config(format!("{SEED_ENV}={s:?}: {e}")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive_ints = [
            ("K", self.k),
            ("H", self.h),
            ("envs", self.envs),
            ("n_steps", self.n_steps),
            ("enc_width", self.enc_width),
            ("act_width", self.act_width),
            ("head_width", self.head_width),
        ];
        for (name, v) in positive_ints {
            if v == 0 {
                return Err(DpfrlError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.total_steps == 0 {
            return Err(DpfrlError::Config("total_steps must be at least 1".into()));
        }
        let positive = [
            ("lr", self.lr),
            ("clip", self.clip),
            ("rms_eps", self.rms_eps),
            ("max_step", self.max_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DpfrlError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("value_coef", self.value_coef),
            ("entropy_coef", self.entropy_coef),
            ("sigma_min", self.sigma_min),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DpfrlError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        let unit = [
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("rms_alpha", self.rms_alpha),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(DpfrlError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            obs_dim: 2 + self.noise_len,
            h: self.h,
            k: if self.variant.uses_particles() { self.k } else { 1 },
            m: self.m,
            enc_width: self.enc_width,
            act_width: self.act_width,
            head_width: self.head_width,
            sigma_min: self.sigma_min,
            alpha: self.alpha,
            seed: self.seed,
        }
    }

    pub fn hike_config(&self) -> Result<HikeConfig> {
        let reward_map = match &self.reward_map {
            Some(p) => RewardMap::Grid(GridMap::load(p)?),
            None => RewardMap::default(),
        };
        let cfg = HikeConfig {
            noise_len: self.noise_len,
            max_step: self.max_step,
            reward_map,
            ..HikeConfig::default()
        };
        Ok(if self.env_noise { cfg } else { cfg.deterministic() })
    }

    pub fn steps_per_update(&self) -> u64 {
        (self.envs * self.n_steps) as u64
    }

    pub fn total_updates(&self) -> u64 {
        self.total_steps.div_ceil(self.steps_per_update())
    }
}

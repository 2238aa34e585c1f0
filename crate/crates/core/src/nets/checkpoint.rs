use std::path::Path;

use dpfrl_autodiff::Scalar;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{DpfrlError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// JSON checkpoint: version tag, the run's config echo, parameters and batch-norm statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: serde_json::Value,
    pub params: Vec<NamedArray>,
    pub running_stats: Vec<NamedStats>,
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn from_f64<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64_lossy(x)).collect()
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| DpfrlError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| DpfrlError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DpfrlError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| DpfrlError::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(DpfrlError::Checkpoint(format!(
                "{}: version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        Ok(ck)
    }
}

impl<T: Scalar> Model<T> {
    pub fn to_checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config,
            params: self
                .params
                .iter()
                .map(|p| NamedArray {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: to_f64(&p.values),
                })
                .collect(),
            running_stats: self
                .running
                .iter()
                .map(|r| NamedStats {
                    name: r.name.clone(),
                    mean: to_f64(&r.mean),
                    var: to_f64(&r.var),
                })
                .collect(),
        }
    }

    /// Overwrites parameters and statistics; every name and shape must match this model.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.params.len() != self.params.len() || ck.running_stats.len() != self.running.len() {
            return Err(DpfrlError::Checkpoint(format!(
                "checkpoint has {} tensors and {} norm layers, model has {} and {}",
                ck.params.len(),
                ck.running_stats.len(),
                self.params.len(),
                self.running.len()
            )));
        }
        for (i, a) in ck.params.iter().enumerate() {
            let p = self.params.get(super::ParamId(i));
            if p.name != a.name || p.shape != a.shape || a.values.len() != p.values.len() {
                return Err(DpfrlError::Checkpoint(format!(
                    "tensor {i}: checkpoint {} {:?}, model {} {:?}",
                    a.name, a.shape, p.name, p.shape
                )));
            }
        }
        for (r, s) in self.running.iter().zip(&ck.running_stats) {
            if r.name != s.name || r.mean.len() != s.mean.len() || r.var.len() != s.var.len() {
                return Err(DpfrlError::Checkpoint(format!(
                    "norm layer {}: statistics do not match {}",
                    s.name, r.name
                )));
            }
        }
        for (i, a) in ck.params.iter().enumerate() {
            self.params.param_mut(super::ParamId(i)).values = from_f64(&a.values);
        }
        for (r, s) in self.running.iter_mut().zip(&ck.running_stats) {
            r.mean = from_f64(&s.mean);
            r.var = from_f64(&s.var);
        }
        Ok(())
    }
}

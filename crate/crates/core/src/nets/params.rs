use std::ops::Index;

use dpfrl_autodiff::{BatchNormMode, BatchStats, Scalar, Tape, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::rng::{stream_rng, Stream};

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Orthogonal rows or columns (whichever are fewer), times a gain.
    Orthogonal(f64),
    Normal(f64),
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> ParamId {
        let id = self.params.len();
        let n: usize = shape.iter().product();
        let mut rng = stream_rng(seed, Stream::ParamInit, id as u64, 0);
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
            Init::Orthogonal(gain) => {
                let (rows, cols) = match shape {
                    [r, c] => (*r, *c),
                    _ => (1, n),
                };
                orthogonal(rows, cols, gain, &mut rng)
            }
        };
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            values: values.into_iter().map(T::from_f64_lossy).collect(),
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.params.iter_mut().map(|p| p.values.as_mut_slice())
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.values.len()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flat_map(|p| &p.values).all(|v| v.is_finite())
    }

    /// Puts every tensor on `tape`, trainable or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.values.clone(), &p.shape)
                } else {
                    tape.constant(p.values.clone(), &p.shape)
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Bound { vars })
    }

    /// Gradients of bound parameters after `backward`, zeros where none reached.
    pub fn grads(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Vec<T>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| {
                tape.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); p.values.len()])
            })
            .collect()
    }
}

/// `rows × cols` matrix with orthonormal columns (rows ≥ cols) or rows, scaled by `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Vec<f64> {
    let (n, m) = (rows.max(cols), rows.min(cols));
    // m vectors of length n, Gram–Schmidt with re-orthogonalization
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            let (r, c) = if rows >= cols { (i, j) } else { (j, i) };
            out[r * cols + c] = gain * x;
        }
    }
    out
}

/// Tensors of a [`ParamStore`] placed on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Running batch-norm statistics of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(name: &str, width: usize) -> Self {
        RunningStats {
            name: name.to_string(),
            mean: vec![T::zero(); width],
            var: vec![T::one(); width],
        }
    }

    /// `running ← (1 − momentum)·running + momentum·batch`
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + momentum * b;
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass context: batch-norm mode, and the batch statistics observed in train mode.
pub struct Fwd<'a, T> {
    pub mode: Mode,
    running: &'a [RunningStats<T>],
    pub updates: Vec<(usize, BatchStats<T>)>,
}

impl<'a, T: Scalar> Fwd<'a, T> {
    pub fn new(mode: Mode, running: &'a [RunningStats<T>]) -> Self {
        Fwd {
            mode,
            running,
            updates: Vec::new(),
        }
    }

    pub fn batch_norm(&mut self, tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var, layer: usize) -> Result<Var> {
        let eps = T::from_f64_lossy(BN_EPS);
        let mode = match self.mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval {
                mean: &self.running[layer].mean,
                var: &self.running[layer].var,
            },
        };
        let (y, stats) = tape.batch_norm(x, gamma, beta, mode, eps)?;
        if let Some(s) = stats {
            self.updates.push((layer, s));
        }
        Ok(y)
    }
}

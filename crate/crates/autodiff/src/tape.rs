use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::AdError;
use crate::scalar::Scalar;
use crate::shape::{broadcast_shapes, for_each_broadcast, numel, split_axis};
use crate::Result;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    Square,
    Sqrt,
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Gather { input: Var, indices: Vec<usize> },
    Sum { input: Var, axis: usize },
    Mean { input: Var, axis: usize },
    SumAll(Var),
    Unary(Var, Unary),
    Clamp { input: Var, lo: T, hi: T },
    Scale(Var, T),
    AddScalar(Var),
    LogSumExp { input: Var, axis: usize },
    GaussianSample { mean: Var, log_var: Var, noise: Vec<T> },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Vec<T>,
    pub(crate) shape: Vec<usize>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
}

/// Batch-normalization mode.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with statistics of the current batch.
    Train,
    /// Normalize with frozen running statistics (per-feature mean and variance).
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-feature statistics of a training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (divisor `N - 1`, or the biased one when `N = 1`).
    pub var: Vec<T>,
}

/// Arena of tensors recorded in creation order, which is also a topological order.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.node(v).value.len()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient after [`Tape::backward`]; `None` for constants or unreachable nodes.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    fn leaf(&mut self, values: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if values.len() != numel(shape) {
            return Err(AdError::Contract(format!(
                "{} values do not fill shape {:?}",
                values.len(),
                shape
            )));
        }
        self.nodes.push(Node {
            value: values,
            shape: shape.to_vec(),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf tensor.
    pub fn param(&mut self, values: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, true)
    }

    /// Constant leaf tensor; gradients never flow into it.
    pub fn constant(&mut self, values: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.nodes.push(Node {
            value: vec![x],
            shape: vec![1],
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, parents: &[Var]) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let out_shape = broadcast_shapes(name, self.shape(a), self.shape(b))?;
        let mut out = vec![T::zero(); numel(&out_shape)];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for_each_broadcast(&out_shape, self.shape(a), self.shape(b), |o, ia, ib| {
                out[o] = f(va[ia], vb[ib]);
            });
        }
        Ok(self.push(out, out_shape, op, &[a, b]))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::shape("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            (k, 1),
            self.value(b),
            (n, 1),
            T::zero(),
            &mut out,
        );
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(AdError::shape("transpose", &[s]));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.push(out, vec![c, r], Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.numel(a) {
            return Err(AdError::shape("reshape", &[self.shape(a), shape]));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(out, shape.to_vec(), Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| AdError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(AdError::shape("concat", &[&base]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let conforms = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !conforms {
                let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.shape(*v)).collect();
                return Err(AdError::shape("concat", &shapes));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v)[o * len..(o + 1) * len]);
            }
        }
        Ok(self.push(
            out,
            out_shape,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(AdError::shape("slice", &[&s]));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = len;
        Ok(self.push(out, out_shape, Op::Slice { input: a, axis, start }, &[a]))
    }

    /// Selects entries along axis 0 (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || indices.iter().any(|&i| i >= s[0]) {
            return Err(AdError::shape("gather_rows", &[&s]));
        }
        let row = numel(&s[1..]);
        let v = self.value(a);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&v[i * row..(i + 1) * row]);
        }
        let mut out_shape = s;
        out_shape[0] = indices.len();
        Ok(self.push(
            out,
            out_shape,
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
            &[a],
        ))
    }

    fn reduce(&mut self, name: &'static str, a: Var, axis: usize) -> Result<(Vec<T>, Vec<usize>)> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(AdError::shape(name, &[&s]));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let v = self.value(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &v[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d = *d + x;
                }
            }
        }
        let mut out_shape = s;
        out_shape[axis] = 1;
        Ok((out, out_shape))
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (out, shape) = self.reduce("sum", a, axis)?;
        Ok(self.push(out, shape, Op::Sum { input: a, axis }, &[a]))
    }

    /// Mean along `axis`, keeping it with size 1.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (mut out, shape) = self.reduce("mean", a, axis)?;
        let n = T::from_usize(self.shape(a)[axis]).unwrap();
        out.iter_mut().for_each(|x| *x = *x / n);
        Ok(self.push(out, shape, Op::Mean { input: a, axis }, &[a]))
    }

    /// Sum of every element, as a shape-`[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().copied().sum();
        self.push(vec![total], vec![1], Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.numel(a).max(1)).unwrap();
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let v = self.value(a);
        match kind {
            Unary::Log => {
                if let Some(i) = v.iter().position(|&x| x < T::zero()) {
                    return Err(AdError::Domain {
                        op: "log",
                        detail: format!("negative input {} at {}", v[i], i),
                    });
                }
            }
            Unary::Sqrt => {
                if let Some(i) = v.iter().position(|&x| x < T::zero()) {
                    return Err(AdError::Domain {
                        op: "sqrt",
                        detail: format!("negative input {} at {}", v[i], i),
                    });
                }
            }
            _ => {}
        }
        let f: fn(T) -> T = match kind {
            Unary::Exp => |x| x.exp(),
            Unary::Log => |x| x.ln(),
            Unary::Tanh => |x| x.tanh(),
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
            Unary::Relu => |x| x.max(T::zero()),
            Unary::Square => |x| x * x,
            Unary::Sqrt => |x| x.sqrt(),
        };
        let out = v.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Unary(a, kind), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid).expect("sigmoid is total")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus).expect("softplus is total")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu).expect("relu is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square).expect("square is total")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(AdError::Contract(format!("clamp bounds {lo} > {hi}")));
        }
        let out = self.value(a).iter().map(|&x| x.max(lo).min(hi)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Clamp { input: a, lo, hi }, &[a]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::AddScalar(a), &[a])
    }

    /// Numerically stable `log Σ exp` along `axis`, keeping it with size 1.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(AdError::shape("logsumexp", &[&s]));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let v = self.value(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| v[(o * n + j) * inner + i];
                let max = (0..n).map(at).fold(T::neg_infinity(), T::max);
                out[o * inner + i] = if max == T::neg_infinity() || max == T::infinity() {
                    max
                } else {
                    let acc: T = (0..n).map(|j| (at(j) - max).exp()).sum();
                    max + acc.ln()
                };
            }
        }
        let mut out_shape = s;
        out_shape[axis] = 1;
        Ok(self.push(out, out_shape, Op::LogSumExp { input: a, axis }, &[a]))
    }

    /// Reparameterized draw `mean + exp(0.5 · log_var) · ξ`, `ξ ~ N(0, I)` from `rng`.
    pub fn gaussian_sample<R: Rng + ?Sized>(
        &mut self,
        mean: Var,
        log_var: Var,
        rng: &mut R,
    ) -> Result<Var> {
        if self.shape(mean) != self.shape(log_var) {
            return Err(AdError::shape(
                "gaussian_sample",
                &[self.shape(mean), self.shape(log_var)],
            ));
        }
        let noise: Vec<T> = (0..self.numel(mean))
            .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        self.gaussian_sample_with(mean, log_var, noise)
    }

    /// As [`Tape::gaussian_sample`] with caller-provided standard-normal noise.
    pub fn gaussian_sample_with(&mut self, mean: Var, log_var: Var, noise: Vec<T>) -> Result<Var> {
        if self.shape(mean) != self.shape(log_var) || noise.len() != self.numel(mean) {
            return Err(AdError::shape(
                "gaussian_sample",
                &[self.shape(mean), self.shape(log_var), &[noise.len()]],
            ));
        }
        let half = T::from_f64_lossy(0.5);
        let out = self
            .value(mean)
            .iter()
            .zip(self.value(log_var))
            .zip(&noise)
            .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
            .collect();
        let shape = self.shape(mean).to_vec();
        Ok(self.push(
            out,
            shape,
            Op::GaussianSample {
                mean,
                log_var,
                noise,
            },
            &[mean, log_var],
        ))
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).to_vec();
        let shape = self.shape(a).to_vec();
        self.nodes.push(Node {
            value,
            shape,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Batch normalization of an `N × C` input over its rows.
    ///
    /// Returns the batch statistics in training mode so the caller can update
    /// its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2
            || self.numel(gamma) != s[1]
            || self.numel(beta) != s[1]
            || s[0] == 0
        {
            return Err(AdError::shape(
                "batch_norm",
                &[&s, self.shape(gamma), self.shape(beta)],
            ));
        }
        let (n, c) = (s[0], s[1]);
        let nf = T::from_usize(n).unwrap();
        let v = self.value(x);
        let (mean, var, stats, train) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![T::zero(); c];
                for row in v.chunks(c) {
                    for (m, &x) in mean.iter_mut().zip(row) {
                        *m = *m + x;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / nf);
                let mut var = vec![T::zero(); c];
                for row in v.chunks(c) {
                    for ((s2, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s2 = *s2 + (x - m) * (x - m);
                    }
                }
                let unbiased_div = if n > 1 { nf - T::one() } else { nf };
                let unbiased = var.iter().map(|&s2| s2 / unbiased_div).collect();
                var.iter_mut().for_each(|s2| *s2 = *s2 / nf);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats), true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(AdError::shape("batch_norm", &[&s, &[mean.len()], &[var.len()]]));
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&s2| T::one() / (s2 + eps).sqrt()).collect();
        let mut normalized = vec![T::zero(); n * c];
        for (row_out, row_in) in normalized.chunks_mut(c).zip(v.chunks(c)) {
            for j in 0..c {
                row_out[j] = (row_in[j] - mean[j]) * inv_std[j];
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); n * c];
        for (row_out, row_norm) in out.chunks_mut(c).zip(normalized.chunks(c)) {
            for j in 0..c {
                row_out[j] = row_norm[j] * g[j] + b[j];
            }
        }
        let var_out = self.push(
            out,
            s,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                normalized,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        Ok((var_out, stats))
    }

    /// Fails with the first non-finite coordinate of `a`.
    pub fn check_finite(&self, a: Var, context: &str) -> Result<()> {
        match self.value(a).iter().position(|x| !x.is_finite()) {
            Some(index) => Err(AdError::NonFinite {
                context: context.to_string(),
                index,
            }),
            None => Ok(()),
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

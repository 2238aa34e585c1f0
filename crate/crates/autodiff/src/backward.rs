use crate::error::AdError;
use crate::scalar::Scalar;
use crate::shape::{for_each_broadcast, numel, split_axis};
use crate::tape::{sigmoid, Op, Tape, Unary, Var};
use crate::Result;

impl<T: Scalar> Tape<T> {
    /// Reverse sweep from a scalar root.
    ///
    /// Gradients from earlier calls are cleared. A tensor used by several
    /// consumers receives the sum of their contributions.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.numel(root) != 1 {
            return Err(AdError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        grads[root.0] = Some(vec![T::one()]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let ga = self.wants(*a).then(|| vec![T::zero(); numel(sa)]);
                let gb = self.wants(*b).then(|| vec![T::zero(); numel(sb)]);
                let (mut ga, mut gb) = (ga, gb);
                for_each_broadcast(&node.shape, sa, sb, |o, ia, ib| {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] = ga[ia] + g[o];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] = gb[ib] + sign * g[o];
                    }
                });
                if let Some(ga) = ga {
                    accumulate(grads, *a, &ga);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = self.wants(*a).then(|| vec![T::zero(); numel(sa)]);
                let mut gb = self.wants(*b).then(|| vec![T::zero(); numel(sb)]);
                for_each_broadcast(&node.shape, sa, sb, |o, ia, ib| {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] = ga[ia] + g[o] * vb[ib];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] = gb[ib] + g[o] * va[ia];
                    }
                });
                if let Some(ga) = ga {
                    accumulate(grads, *a, &ga);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *b, &gb);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, (n, 1), self.value(*b), (1, n), T::zero(), &mut ga);
                    accumulate(grads, *a, &ga);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*a), (1, k), g, (n, 1), T::zero(), &mut gb);
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Reshape(a) => accumulate(grads, *a, g),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if self.wants(*v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate(grads, *v, &gv);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*input), *axis);
                let len = node.shape[*axis];
                let mut ga = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(grads, *input, &ga);
            }
            Op::Gather { input, indices } => {
                let row = numel(&node.shape[1..]);
                let mut ga = vec![T::zero(); self.numel(*input)];
                for (j, &i) in indices.iter().enumerate() {
                    for c in 0..row {
                        ga[i * row + c] = ga[i * row + c] + g[j * row + c];
                    }
                }
                accumulate(grads, *input, &ga);
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*input), *axis);
                let factor = if matches!(node.op, Op::Mean { .. }) {
                    T::one() / T::from_usize(n).unwrap()
                } else {
                    T::one()
                };
                let mut ga = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            ga[(o * n + j) * inner + i] = g[o * inner + i] * factor;
                        }
                    }
                }
                accumulate(grads, *input, &ga);
            }
            Op::SumAll(a) => {
                let ga = vec![g[0]; self.numel(*a)];
                accumulate(grads, *a, &ga);
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let two = T::one() + T::one();
                let ga: Vec<T> = match kind {
                    Unary::Exp => zip3(g, x, out, |g, _, y| g * y),
                    Unary::Log => zip3(g, x, out, |g, x, _| g / x),
                    Unary::Tanh => zip3(g, x, out, |g, _, y| g * (T::one() - y * y)),
                    Unary::Sigmoid => zip3(g, x, out, |g, _, y| g * y * (T::one() - y)),
                    Unary::Softplus => zip3(g, x, out, |g, x, _| g * sigmoid(x)),
                    Unary::Relu => zip3(g, x, out, |g, x, _| {
                        if x > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    }),
                    Unary::Square => zip3(g, x, out, |g, x, _| g * two * x),
                    // subgradient 0 at sqrt(0)
                    Unary::Sqrt => zip3(g, x, out, |g, _, y| {
                        if y > T::zero() {
                            g / (two * y)
                        } else {
                            T::zero()
                        }
                    }),
                };
                accumulate(grads, *a, &ga);
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input);
                let ga: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { T::zero() })
                    .collect();
                accumulate(grads, *input, &ga);
            }
            Op::Scale(a, c) => {
                let ga: Vec<T> = g.iter().map(|&g| g * *c).collect();
                accumulate(grads, *a, &ga);
            }
            Op::AddScalar(a) => accumulate(grads, *a, g),
            Op::LogSumExp { input, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*input), *axis);
                let x = self.value(*input);
                let mut ga = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let y = out[o * inner + i];
                        let go = g[o * inner + i];
                        for j in 0..n {
                            let at = (o * n + j) * inner + i;
                            let w = if y.is_finite() {
                                (x[at] - y).exp()
                            } else {
                                T::zero()
                            };
                            ga[at] = go * w;
                        }
                    }
                }
                accumulate(grads, *input, &ga);
            }
            Op::GaussianSample {
                mean,
                log_var,
                noise,
            } => {
                accumulate(grads, *mean, g);
                if self.wants(*log_var) {
                    let half = T::from_f64_lossy(0.5);
                    let lv = self.value(*log_var);
                    let glv: Vec<T> = g
                        .iter()
                        .zip(lv)
                        .zip(noise)
                        .map(|((&g, &lv), &e)| g * half * (half * lv).exp() * e)
                        .collect();
                    accumulate(grads, *log_var, &glv);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let n = node.shape[0];
                let gam = self.value(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_g_xhat = vec![T::zero(); c];
                for (gr, xr) in g.chunks(c).zip(normalized.chunks(c)) {
                    for j in 0..c {
                        sum_g[j] = sum_g[j] + gr[j];
                        sum_g_xhat[j] = sum_g_xhat[j] + gr[j] * xr[j];
                    }
                }
                if self.wants(*input) {
                    let mut gx = vec![T::zero(); n * c];
                    let nf = T::from_usize(n).unwrap();
                    for ((dst, gr), xr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(normalized.chunks(c))
                    {
                        for j in 0..c {
                            dst[j] = if *train {
                                gam[j] * inv_std[j] / nf
                                    * (nf * gr[j] - sum_g[j] - xr[j] * sum_g_xhat[j])
                            } else {
                                gam[j] * inv_std[j] * gr[j]
                            };
                        }
                    }
                    accumulate(grads, *input, &gx);
                }
                accumulate(grads, *gamma, &sum_g_xhat);
                accumulate(grads, *beta, &sum_g);
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn zip3<T: Scalar>(g: &[T], x: &[T], y: &[T], f: impl Fn(T, T, T) -> T) -> Vec<T> {
    g.iter()
        .zip(x)
        .zip(y)
        .map(|((&g, &x), &y)| f(g, x, y))
        .collect()
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a = *a + x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

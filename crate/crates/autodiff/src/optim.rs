use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient had a NaN or infinite entry; parameters were left untouched.
    SkippedNonFinite,
}

/// RMSProp with one squared-gradient accumulator per parameter tensor.
///
/// `acc ← α·acc + (1−α)·g²`, `p ← p − lr·g / (√acc + eps)`.
#[derive(Debug, Clone)]
pub struct RmsProp<T> {
    pub lr: T,
    pub alpha: T,
    pub eps: T,
    acc: Vec<Vec<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(sizes: &[usize], lr: T, alpha: T, eps: T) -> Self {
        RmsProp {
            lr,
            alpha,
            eps,
            acc: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn accumulators(&self) -> &[Vec<T>] {
        &self.acc
    }

    pub fn step<'a, I>(&mut self, params: I, grads: &[Vec<T>]) -> StepOutcome
    where
        I: IntoIterator<Item = &'a mut [T]>,
    {
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            log::warn!("rmsprop: non-finite gradient, step skipped");
            return StepOutcome::SkippedNonFinite;
        }
        let one = T::one();
        for ((p, g), acc) in params.into_iter().zip(grads).zip(&mut self.acc) {
            assert_eq!(p.len(), g.len(), "parameter/gradient size mismatch");
            for ((p, &g), a) in p.iter_mut().zip(g).zip(acc.iter_mut()) {
                *a = self.alpha * *a + (one - self.alpha) * g * g;
                *p = *p - self.lr * g / (a.sqrt() + self.eps);
            }
        }
        StepOutcome::Applied
    }
}

pub fn global_norm<T: Scalar>(grads: &[Vec<T>]) -> T {
    grads
        .iter()
        .flatten()
        .map(|&g| g * g)
        .fold(T::zero(), |a, b| a + b)
        .sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the factor applied.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: T) -> T {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g = *g * scale);
        scale
    } else {
        T::one()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsprop_direct_formula() {
        let mut opt = RmsProp::new(&[1], 0.1, 0.99, 0.0);
        let mut p = vec![1.0f64];
        let out = opt.step([p.as_mut_slice()], &[vec![1.0]]);
        assert_eq!(out, StepOutcome::Applied);
        assert!((opt.accumulators()[0][0] - 0.01).abs() < 1e-15);
        assert!(p[0].abs() < 1e-12);
    }

    #[test]
    fn rmsprop_zero_grad_keeps_params() {
        let mut opt = RmsProp::new(&[2], 1e-4, 0.99, 1e-5);
        let mut p = vec![0.3f64, -0.7];
        opt.step([p.as_mut_slice()], &[vec![0.0, 0.0]]);
        assert_eq!(p, vec![0.3, -0.7]);
    }

    #[test]
    fn rmsprop_is_deterministic() {
        let run = || {
            let mut opt = RmsProp::new(&[3], 1e-2, 0.99, 1e-5);
            let mut p = vec![0.1f32, 0.2, 0.3];
            for _ in 0..2 {
                opt.step([p.as_mut_slice()], &[vec![0.5, -1.0, 2.0]]);
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rmsprop_skips_non_finite() {
        let mut opt = RmsProp::new(&[1], 0.1, 0.99, 1e-5);
        let mut p = vec![1.0f64];
        let out = opt.step([p.as_mut_slice()], &[vec![f64::NAN]]);
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(p, vec![1.0]);
        assert_eq!(opt.accumulators()[0][0], 0.0);
    }

    #[test]
    fn clip_cases() {
        let mut g = vec![vec![0.6f64], vec![0.8]];
        assert_eq!(clip_global_norm(&mut g, 0.5), 0.5);
        assert!((global_norm(&g) - 0.5).abs() < 1e-12);

        let mut g = vec![vec![0.3f64]];
        assert_eq!(clip_global_norm(&mut g, 0.5), 1.0);
        assert_eq!(g[0][0], 0.3);

        let mut g = vec![vec![0.3f64, 0.4]];
        assert_eq!(clip_global_norm(&mut g, 0.5), 1.0);
    }
}

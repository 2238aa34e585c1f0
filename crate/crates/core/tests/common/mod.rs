//! Measurements shared by the property suites and the acceptance target.
//! Each returns the measured quantity; callers compare against thresholds.
#![allow(dead_code)]

use dpfrl_autodiff::Tape;
use dpfrl_core::belief::{self, sample_indices, soft_resample_with_indices, ParticleBelief};
use dpfrl_core::env::{HikeConfig, MountainHike, VecEnv};
use dpfrl_core::nets::{Model, ModelConfig, Variant};
use dpfrl_core::rng::{stream_rng, Stream};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Puts particles (`E·K × H`) and normalized log-weights (`E × K`) on a tape.
pub fn belief_on(tape: &mut Tape<f64>, particles: Vec<f64>, log_weights: Vec<f64>, envs: usize, k: usize) -> ParticleBelief {
    let h = particles.len() / (envs * k);
    ParticleBelief {
        particles: tape.constant(particles, &[envs * k, h]).unwrap(),
        log_weights: tape.constant(log_weights, &[envs, k]).unwrap(),
        envs,
        k,
        h,
    }
}

/// Row-wise log-softmax of raw logits.
pub fn log_normalize(raw: &[f64], k: usize) -> Vec<f64> {
    raw.chunks(k)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter().map(move |x| x - lse).collect::<Vec<_>>()
        })
        .collect()
}

/// Largest `|Σ_k exp(log w) − 1|` over envs after reweighting with the given logits.
pub fn normalization_error(prior: &[f64], logits: &[f64], envs: usize, k: usize) -> f64 {
    let mut t = Tape::new();
    let b = belief_on(&mut t, vec![0.0; envs * k], log_normalize(prior, k), envs, k);
    let l = t.constant(logits.to_vec(), &[envs, k]).unwrap();
    let out = belief::reweight_with_logits(&mut t, &b, l, 0).unwrap();
    t.value(out.log_weights)
        .chunks(k)
        .map(|row| (row.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Largest log-weight difference between reweighting with `logits` and with `logits + shift`.
pub fn logit_shift_error(prior: &[f64], logits: &[f64], shift: f64, envs: usize, k: usize) -> f64 {
    let mut t = Tape::new();
    let b = belief_on(&mut t, vec![0.0; envs * k], log_normalize(prior, k), envs, k);
    let l1 = t.constant(logits.to_vec(), &[envs, k]).unwrap();
    let l2 = t.constant(logits.iter().map(|x| x + shift).collect(), &[envs, k]).unwrap();
    let a = belief::reweight_with_logits(&mut t, &b, l1, 0).unwrap();
    let c = belief::reweight_with_logits(&mut t, &b, l2, 0).unwrap();
    max_diff(t.value(a.log_weights), t.value(c.log_weights))
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Chi-square statistic of `draws` soft-resampled indices against
/// `q = α·w + (1 − α)/K`, and the critical value at `p`.
pub fn resample_chi_square(weights: &[f64], alpha: f64, draws: usize, p: f64, seed: u64) -> (f64, f64) {
    let k = weights.len();
    let mut r = rng(seed);
    let u: Vec<f64> = (0..draws).map(|_| r.random::<f64>()).collect();
    let mut counts = vec![0usize; k];
    for i in sample_indices(weights, alpha, &u) {
        counts[i] += 1;
    }
    let stat = counts
        .iter()
        .zip(weights)
        .map(|(&c, &w)| {
            let expected = draws as f64 * (alpha * w + (1.0 - alpha) / k as f64);
            (c as f64 - expected).powi(2) / expected
        })
        .sum();
    let critical = ChiSquared::new((k - 1) as f64).unwrap().inverse_cdf(1.0 - p);
    (stat, critical)
}

/// Relative error between the weighted particle mean before soft-resampling
/// and its average after, over `trials` independent resamples.
pub fn resample_mean_bias(k: usize, alpha: f64, trials: usize, seed: u64) -> f64 {
    let h = 2;
    let mut r = rng(seed);
    let particles: Vec<f64> = (0..k * h).map(|_| 1.0 + 2.0 * r.random::<f64>()).collect();
    let lw = log_normalize(&normals(&mut r, k, 1.0), k);
    let w: Vec<f64> = lw.iter().map(|x| x.exp()).collect();
    let before: Vec<f64> = (0..h).map(|d| (0..k).map(|i| w[i] * particles[i * h + d]).sum()).collect();
    let mut acc = vec![0.0; h];
    for _ in 0..trials {
        let u: Vec<f64> = (0..k).map(|_| r.random::<f64>()).collect();
        let idx = sample_indices(&w, alpha, &u);
        let mut t = Tape::new();
        let b = belief_on(&mut t, particles.clone(), lw.clone(), 1, k);
        let out = soft_resample_with_indices(&mut t, &b, alpha, &[idx]).unwrap();
        let mean = belief::mean_particle(&mut t, &out).unwrap();
        for (a, m) in acc.iter_mut().zip(t.value(mean)) {
            *a += m / trials as f64;
        }
    }
    before
        .iter()
        .zip(&acc)
        .map(|(b, a)| ((a - b) / b).abs())
        .fold(0.0, f64::max)
}

/// `(|M(0) − 1|, max |∂M/∂v at 0 − mean particle|)` for a random belief.
pub fn mgf_identity_errors(envs: usize, k: usize, h: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let particles = normals(&mut r, envs * k * h, 1.0);
    let lw = log_normalize(&normals(&mut r, envs * k, 1.0), k);
    let mut t = Tape::new();
    let b = belief_on(&mut t, particles, lw, envs, k);
    let v = t.param(vec![0.0; h], &[1, h]).unwrap();
    let feats = belief::mgf_features(&mut t, &b, v).unwrap();
    let m = feats.mgf.unwrap();
    let m0 = t.value(m).iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max);
    let mean = t.value(feats.mean).to_vec();
    let mut grad_err: f64 = 0.0;
    for e in 0..envs {
        let me = t.slice(m, 0, e, 1).unwrap();
        let s = t.sum_all(me);
        t.backward(s).unwrap();
        let g = t.grad(v).unwrap().to_vec();
        grad_err = grad_err.max(max_diff(&g, &mean[e * h..(e + 1) * h]));
    }
    (m0, grad_err)
}

/// Largest feature change (mean and MGF) when each env's particles and weights
/// are jointly permuted.
pub fn permutation_error(envs: usize, k: usize, h: usize, m: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let particles = normals(&mut r, envs * k * h, 1.0);
    let lw = log_normalize(&normals(&mut r, envs * k, 1.0), k);
    let locations = normals(&mut r, m * h, 0.5);
    let mut pp = Vec::with_capacity(particles.len());
    let mut pw = Vec::with_capacity(lw.len());
    for e in 0..envs {
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut r);
        for &i in &order {
            let row = (e * k + i) * h;
            pp.extend_from_slice(&particles[row..row + h]);
            pw.push(lw[e * k + i]);
        }
    }
    let mut t = Tape::new();
    let v = t.constant(locations, &[m, h]).unwrap();
    let a = belief_on(&mut t, particles, lw, envs, k);
    let b = belief_on(&mut t, pp, pw, envs, k);
    let fa = belief::mgf_features(&mut t, &a, v).unwrap();
    let fb = belief::mgf_features(&mut t, &b, v).unwrap();
    let ca = fa.concat(&mut t).unwrap();
    let cb = fb.concat(&mut t).unwrap();
    max_diff(t.value(ca), t.value(cb))
}

fn centered_hike() -> HikeConfig {
    HikeConfig {
        start: [0.0, 0.0],
        start_noise: false,
        ..HikeConfig::default()
    }
}

pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Per-coordinate variance of the position change under a zero action, from
/// the map centre so clamping never applies.
pub fn transition_variance(samples: usize, seed: u64) -> [f64; 2] {
    let mut env = MountainHike::new(centered_hike());
    let mut dx = [Vec::with_capacity(samples), Vec::with_capacity(samples)];
    for i in 0..samples {
        let mut r = stream_rng(seed, Stream::EnvStep, 0, i as u64);
        env.reset(&mut r);
        let s = env.step([0.0, 0.0], &mut r).unwrap();
        for (d, p) in dx.iter_mut().zip(s.position) {
            d.push(p);
        }
    }
    [sample_variance(&dx[0]), sample_variance(&dx[1])]
}

/// Per-coordinate variance of observation minus true position.
pub fn observation_variance(samples: usize, seed: u64) -> [f64; 2] {
    let mut env = MountainHike::new(centered_hike());
    let mut d = [Vec::with_capacity(samples), Vec::with_capacity(samples)];
    for i in 0..samples {
        let mut r = stream_rng(seed, Stream::EnvReset, 0, i as u64);
        let obs = env.reset(&mut r);
        let p = env.position();
        for c in 0..2 {
            d[c].push(obs[c] - p[c]);
        }
    }
    [sample_variance(&d[0]), sample_variance(&d[1])]
}

/// Episode lengths observed over `episodes` runs of a random policy.
pub fn episode_lengths(episodes: usize, seed: u64) -> Vec<usize> {
    let mut env = VecEnv::new(HikeConfig::default(), 1, seed).unwrap();
    env.reset();
    let mut r = rng(seed);
    let mut lengths = Vec::new();
    let mut t = 0;
    while lengths.len() < episodes {
        let a = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let s = env.step(&[a]).unwrap();
        t += 1;
        if s.dones[0] {
            lengths.push(t);
            t = 0;
        }
    }
    lengths
}

/// Max |GRU baseline − K=1 noiseless DPFRL transition| with the recurrent
/// cell weights copied from the DPFRL model, plus both cells' parameter counts.
pub fn gru_transition_gap(h: usize, envs: usize, seed: u64) -> (f64, usize, usize) {
    let cfg = |variant| ModelConfig {
        variant,
        obs_dim: 4,
        h,
        k: 1,
        m: 3,
        enc_width: 64,
        act_width: 64,
        head_width: 64,
        sigma_min: 0.0,
        alpha: 0.9,
        seed,
    };
    let dp = Model::<f64>::new(cfg(Variant::Dpfrl)).unwrap();
    let mut gru = Model::<f64>::new(ModelConfig { seed: seed + 1, ..cfg(Variant::Gru) }).unwrap();
    let mut cell_params = [0usize; 2];
    for p in dp.params.iter() {
        if p.name.starts_with("cell.gates") || p.name.starts_with("cell.cand") {
            let id = gru.param_id(&p.name).unwrap();
            gru.params.param_mut(id).values.clone_from(&p.values);
            cell_params[0] += p.values.len();
        }
    }
    cell_params[1] = gru
        .params
        .iter()
        .filter(|p| p.name.starts_with("cell."))
        .map(|p| p.values.len())
        .sum();

    let mut r = rng(seed);
    let hv = normals(&mut r, envs * h, 1.0);
    let xv = normals(&mut r, envs * dp.cfg.cell_input(), 1.0);
    let mut t = Tape::new();
    let bd = dp.bind(&mut t, false).unwrap();
    let bg = gru.bind(&mut t, false).unwrap();
    let x = t.constant(xv, &[envs, dp.cfg.cell_input()]).unwrap();
    let hidden = t.constant(hv.clone(), &[envs, h]).unwrap();
    let g = gru.gru_baseline_step(&mut t, &bg, hidden, x).unwrap();
    let belief = belief_on(&mut t, hv, vec![0.0; envs], envs, 1);
    let noise = belief::StepNoise::new(seed, 0, false);
    let d = belief::transition_update(&mut t, &belief, x, &dp.cell(&bd), 0.0, &noise).unwrap();
    (max_diff(t.value(g), t.value(d.particles)), cell_params[0], cell_params[1])
}

use super::*;
use crate::belief::StepNoise;
use crate::nets::{Memory, Variant};

fn small(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        h: 8,
        k: 3,
        m: 2,
        envs: 2,
        total_steps: 200,
        enc_width: 8,
        act_width: 8,
        head_width: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn smoke_run_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        enc_width: 64,
        act_width: 64,
        head_width: 64,
        checkpoint_interval: 10,
        particle_dump: true,
        ..small(Variant::Dpfrl)
    };
    let summary = train(&cfg, dir.path()).unwrap();
    assert_eq!(summary.updates, 20);
    let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 20);
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    for key in ["step", "update", "episodes", "mean_return", "policy_loss", "value_loss", "entropy_loss", "grad_norm"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let timing = std::fs::read_to_string(dir.path().join(TIMING_FILE)).unwrap();
    assert!(timing.lines().all(|l| l.contains("wall_time")));
    assert!(dir.path().join("checkpoints").join(FINAL_CHECKPOINT).exists());
    assert!(dir.path().join("checkpoints/update_0000010.json").exists());
    let echoed = TrainConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(echoed, cfg);
    let particles = std::fs::read_to_string(dir.path().join(PARTICLES_FILE)).unwrap();
    assert_eq!(particles.lines().count(), 1 + 20 * 2 * 3);
}

#[test]
fn every_variant_trains_briefly() {
    for v in Variant::ALL {
        let mut t = Trainer::<f32>::new(small(v)).unwrap();
        for _ in 0..3 {
            let m = t.step().unwrap();
            assert!(m.grad_norm.is_finite(), "{v}");
        }
    }
}

#[test]
fn same_seed_same_metrics() {
    let run = |seed| {
        let mut t = Trainer::<f32>::new(TrainConfig { seed, ..small(Variant::Dpfrl) }).unwrap();
        (0..10).map(|_| t.step().unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn mean_return_appears_after_first_episode() {
    let mut t = Trainer::<f32>::new(small(Variant::Gru)).unwrap();
    for u in 1..=16 {
        let m = t.step().unwrap();
        // 5 steps per update, 75-step episodes
        assert_eq!(m.mean_return.is_some(), u * 5 >= 75, "update {u}");
        assert_eq!(m.episodes, if u * 5 >= 75 { 2 } else { 0 });
    }
}

fn rollout_setup(episode_len: usize, envs: usize) -> (Model<f64>, VecEnv, TrainConfig) {
    let cfg = TrainConfig {
        envs,
        ..small(Variant::Dpfrl)
    };
    let model = Model::<f64>::new(cfg.model_config()).unwrap();
    let hike = HikeConfig {
        episode_len,
        ..cfg.hike_config().unwrap()
    };
    (model, VecEnv::new(hike, envs, 3).unwrap(), cfg)
}

#[test]
fn rollout_shapes() {
    let (model, mut env, _) = rollout_setup(75, 16);
    let carry = Carry::<f64>::start(env.reset());
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, true).unwrap();
    let mut fwd = model.fwd(Mode::Train);
    let opts = RolloutOpts {
        n_steps: 5,
        filter_noise: true,
        max_step: 1.0,
        bootstrap: true,
    };
    let mut driver = LiveDriver::new(&mut env, 1, false);
    let (out, next) = unroll(&mut tape, &model, &b, &mut fwd, &carry, &opts, &mut driver, &mut ResampleRecord::new()).unwrap();
    assert_eq!(out.log_probs.len(), 5);
    assert!(out.values.iter().all(|&v| tape.shape(v) == [16, 1]));
    assert_eq!(out.rewards.len(), 5);
    assert!(out.rewards.iter().all(|r| r.len() == 16));
    assert_eq!(out.bootstrap.len(), 16);
    assert_eq!(next.step, 5);
}

#[test]
fn belief_after_done_is_fresh_init() {
    let (model, mut env, _) = rollout_setup(3, 8);
    let carry = Carry::<f64>::start(env.reset());
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false).unwrap();
    let mut fwd = model.fwd(Mode::Train);
    let opts = RolloutOpts {
        n_steps: 3,
        filter_noise: true,
        max_step: 1.0,
        bootstrap: false,
    };
    let mut driver = LiveDriver::new(&mut env, 1, false);
    let (out, next) = unroll(&mut tape, &model, &b, &mut fwd, &carry, &opts, &mut driver, &mut ResampleRecord::new()).unwrap();
    assert!(out.dones[2][7]);
    let fresh = model.initial_memory(&mut tape, &b, 8, &StepNoise::new(model.cfg.seed, 3, true)).unwrap();
    let (Some(MemoryState::Particles(carried)), Memory::Particles(fresh)) = (next.memory, fresh) else {
        unreachable!()
    };
    let fresh = crate::belief::BeliefState::read(&tape, &fresh);
    assert_eq!(carried.env_particles(7), fresh.env_particles(7));
    assert_eq!(carried.env_log_weights(7), fresh.env_log_weights(7));
    assert_eq!(&next.prev_action[14..16], &[0.0, 0.0]);
}

#[test]
fn same_seed_same_rollout() {
    let run = || {
        let (model, mut env, _) = rollout_setup(75, 4);
        let carry = Carry::<f64>::start(env.reset());
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false).unwrap();
        let mut fwd = model.fwd(Mode::Train);
        let opts = RolloutOpts {
            n_steps: 5,
            filter_noise: true,
            max_step: 1.0,
            bootstrap: true,
        };
        let mut driver = LiveDriver::new(&mut env, 1, false);
        let (out, next) = unroll(&mut tape, &model, &b, &mut fwd, &carry, &opts, &mut driver, &mut ResampleRecord::new()).unwrap();
        (out.rewards, out.bootstrap, next)
    };
    assert_eq!(run(), run());
}

#[test]
fn gradients_stop_at_rollout_boundary() {
    let (model, mut env, cfg) = rollout_setup(75, 2);
    let carry = Carry::<f64>::start(env.reset());
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, true).unwrap();
    let opts = RolloutOpts {
        n_steps: 3,
        filter_noise: true,
        max_step: 1.0,
        bootstrap: false,
    };
    let mut fwd = model.fwd(Mode::Train);
    let mut driver = LiveDriver::new(&mut env, 1, false);
    let (first, carry2) =
        unroll(&mut tape, &model, &b, &mut fwd, &carry, &opts, &mut driver, &mut ResampleRecord::new()).unwrap();
    let (second, _) =
        unroll(&mut tape, &model, &b, &mut fwd, &carry2, &opts, &mut driver, &mut ResampleRecord::new()).unwrap();
    let returns = vec![vec![1.0; 2]; 3];
    let loss = a2c_loss(&mut tape, &second.log_probs, &second.values, second.entropy, &returns, cfg.value_coef, cfg.entropy_coef)
        .unwrap();
    tape.backward(loss.total).unwrap();
    let Memory::Particles(p) = first.last_memory else { unreachable!() };
    let zero = |g: Option<&[f64]>| g.is_none_or(|g| g.iter().all(|&x| x == 0.0));
    assert!(zero(tape.grad(p.particles)));
    assert!(zero(tape.grad(p.log_weights)));
    for &lp in &first.log_probs {
        assert!(zero(tape.grad(lp)));
    }
    // the second rollout does reach the parameters
    assert!(!zero(tape.grad(b[model.param_id("cell.cand.w_h").unwrap()])));
}

#[test]
fn policy_loss_does_not_reach_value_head() {
    let (model, mut env, cfg) = rollout_setup(75, 2);
    let carry = Carry::<f64>::start(env.reset());
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, true).unwrap();
    let mut fwd = model.fwd(Mode::Train);
    let opts = RolloutOpts {
        n_steps: 4,
        filter_noise: true,
        max_step: 1.0,
        bootstrap: true,
    };
    let mut driver = LiveDriver::new(&mut env, 1, false);
    let (out, _) = unroll(&mut tape, &model, &b, &mut fwd, &carry, &opts, &mut driver, &mut ResampleRecord::new()).unwrap();
    let returns = compute_returns(&out.rewards, &out.dones, &out.bootstrap, cfg.gamma);
    let loss = a2c_loss(&mut tape, &out.log_probs, &out.values, out.entropy, &returns, 0.5, 0.01).unwrap();
    tape.backward(loss.policy).unwrap();
    for name in ["critic.0.w", "critic.0.b", "critic.1.w", "critic.1.b"] {
        let g = tape.grad(b[model.param_id(name).unwrap()]);
        assert!(g.is_none_or(|g| g.iter().all(|&x| x == 0.0)), "{name}");
    }
    let g = tape.grad(b[model.param_id("actor.1.w").unwrap()]).unwrap();
    assert!(g.iter().any(|&x| x != 0.0));
}

#[test]
fn tiny_pipeline_gradcheck() {
    let cfg = TrainConfig {
        noise_len: 2,
        n_steps: 2,
        enc_width: 4,
        act_width: 3,
        head_width: 4,
        ..small(Variant::Dpfrl)
    };
    let r = full_pipeline_gradcheck(&cfg, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn evaluate_rejects_zero_episodes() {
    let model = Model::<f64>::new(small(Variant::Dpfrl).model_config()).unwrap();
    assert!(matches!(evaluate(&model, &small(Variant::Dpfrl), 0, 1), Err(DpfrlError::EmptyReport)));
    assert!(matches!(evaluate_random(&HikeConfig::default(), 0, 1), Err(DpfrlError::EmptyReport)));
}

#[test]
fn deterministic_evaluation_repeats() {
    let cfg = TrainConfig {
        env_noise: false,
        filter_noise: false,
        ..small(Variant::Dpfrl)
    };
    let model = Model::<f64>::new(cfg.model_config()).unwrap();
    let a = evaluate(&model, &cfg, 3, 7).unwrap();
    let b = evaluate(&model, &cfg, 3, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.episodes, 3);
    // no noise anywhere: every episode is the same
    assert!(a.returns.iter().all(|&r| r == a.returns[0]));
}

#[test]
fn checkpoint_with_other_shapes_fails_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Variant::Dpfrl);
    train(&TrainConfig { total_steps: 10, ..cfg.clone() }, dir.path()).unwrap();
    let ck = dir.path().join("checkpoints").join(FINAL_CHECKPOINT);
    assert!(evaluate_checkpoint(&ck, &cfg, 1, 1).is_ok());
    let other = TrainConfig { noise_len: 3, ..cfg };
    assert!(matches!(evaluate_checkpoint(&ck, &other, 1, 1), Err(DpfrlError::Checkpoint(_))));
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::<f32>::new(small(Variant::Gru)).unwrap().with_dump_dir(dir.path().to_path_buf());
    let id = t.model.param_id("critic.1.b").unwrap();
    t.model.params.param_mut(id).values[0] = f32::NAN;
    match t.step() {
        Err(DpfrlError::Training { dump, .. }) => {
            assert!(dump.join("checkpoint.json").exists());
            assert!(dump.join("batch.json").exists());
        }
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn random_policy_stays_near_background() {
    let r = evaluate_random(&HikeConfig::default(), 32, 1).unwrap();
    // the bowl is ≈ −1 across the lower-left quadrant
    assert!(r.mean < -60.0 && r.mean > -76.0, "{r:?}");
}


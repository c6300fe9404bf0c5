use std::path::Path;

use guidegan_core::config::{AggregateKind, GuidanceSource, MergeKind, Schedule, SyntheticConfig};
use guidegan_core::data::{self, Dataset};
use guidegan_core::training::{lr_schedule, mix_parameters, Adam, Convergence, ImagePool, ShadowPair, StopReason, Trainer};
use guidegan_core::TrainingConfig;
use guidegan_tensor::{ParamStore, Tensor};
use proptest::prelude::*;

// ---- pure pieces ------------------------------------------------------------

fn store(vals: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::from_f64(vec![vals.len()], vals).unwrap());
    s
}

fn vals(s: &ParamStore<f64>) -> Vec<f64> {
    s.get(0).value.data().to_vec()
}

#[test]
fn mixing_degenerate_and_scalar_cases() {
    let (mut live, mut shadow) = (store(&[1.5, -2.0]), store(&[0.25, 7.0]));
    mix_parameters(&mut live, &mut shadow, 1.0).unwrap();
    assert_eq!(vals(&live), [1.5, -2.0]);
    assert_eq!(vals(&shadow), [1.5, -2.0]);

    let (mut live, mut shadow) = (store(&[1.5, -2.0]), store(&[0.25, 7.0]));
    mix_parameters(&mut live, &mut shadow, 0.0).unwrap();
    assert_eq!(vals(&live), [0.25, 7.0]);
    assert_eq!(vals(&shadow), [0.25, 7.0]);

    let (mut live, mut shadow) = (store(&[1.0]), store(&[0.0]));
    ShadowPair { live: &mut live, shadow: &mut shadow, mix_lambda: 0.9 }.mix().unwrap();
    assert_eq!(vals(&live), [0.9]);
    assert_eq!(vals(&shadow), [0.9]);

    let (mut live, mut shadow) = (store(&[1.0]), store(&[0.0, 1.0]));
    assert!(mix_parameters(&mut live, &mut shadow, 0.5).is_err());
}

#[test]
fn adam_single_step_on_a_square() {
    // f(theta) = theta^2 at theta = 1: g = 2, m_hat = 2, v_hat = 4
    let mut s = store(&[1.0]);
    let mut opt = Adam::new(&s, 0.5, 0.999);
    s.get_mut(0).grad = Tensor::from_f64(vec![1], &[2.0]).unwrap();
    let lr = 2e-4;
    opt.step(&mut s, lr);
    let expected = 1.0 - lr * 2.0 / (2.0 + 1e-8);
    assert!((vals(&s)[0] - expected).abs() < 1e-10);
    assert_eq!(s.get(0).grad.data(), [0.0]);
}

#[test]
fn adam_zero_lr_and_frozen_params_are_untouched() {
    let mut s = store(&[0.3, -0.7]);
    s.add("frozen", Tensor::from_f64(vec![1], &[5.0]).unwrap());
    s.get_mut(1).trainable = false;
    let mut opt = Adam::new(&s, 0.5, 0.999);
    for p in s.iter_mut() {
        p.grad = Tensor::full(p.value.shape().to_vec(), 1.0);
    }
    opt.step(&mut s, 0.0);
    assert_eq!(vals(&s), [0.3, -0.7]);
    for p in s.iter_mut() {
        p.grad = Tensor::full(p.value.shape().to_vec(), 1.0);
    }
    opt.step(&mut s, 0.1);
    assert_eq!(s.get(1).value.data(), [5.0]);
    assert_ne!(vals(&s), [0.3, -0.7]);
}

#[test]
fn lr_schedule_examples() {
    assert_eq!(lr_schedule(0, 2e-4, Schedule::Step, 100), 2e-4);
    assert_eq!(lr_schedule(50, 2e-4, Schedule::Step, 100), 2e-4);
    assert!((lr_schedule(100, 2e-4, Schedule::Step, 100) - 2e-5).abs() < 1e-18);
    assert!((lr_schedule(250, 2e-4, Schedule::Step, 100) - 2e-6).abs() < 1e-18);
    assert_eq!(lr_schedule(99, 2e-4, Schedule::Linear, 100), 2e-4);
    assert!((lr_schedule(150, 2e-4, Schedule::Linear, 100) - 1e-4).abs() < 1e-18);
    assert_eq!(lr_schedule(200, 2e-4, Schedule::Linear, 100), 0.0);
}

#[test]
fn pool_fill_phase_returns_input() {
    let mut pool = ImagePool::new(3, 1, "pool");
    let x = Tensor::full(vec![3, 2, 2], 0.5f32);
    assert!(pool.query(x.clone()).bit_eq(&x));
    assert_eq!(pool.buffer.len(), 1);
}

#[test]
fn pool_single_slot_state_machine() {
    let old = Tensor::full(vec![1], 1.0f32);
    let new = Tensor::full(vec![1], 2.0f32);
    let (mut swaps, mut keeps) = (0, 0);
    for seed in 0..64 {
        let mut pool = ImagePool::new(1, seed, "pool");
        pool.query(old.clone());
        let out = pool.query(new.clone());
        assert_eq!(pool.buffer.len(), 1);
        if out.bit_eq(&old) {
            assert!(pool.buffer[0].bit_eq(&new));
            swaps += 1;
        } else {
            assert!(out.bit_eq(&new));
            assert!(pool.buffer[0].bit_eq(&old));
            keeps += 1;
        }
    }
    assert!(swaps > 0 && keeps > 0);
}

proptest! {
    #[test]
    fn pool_never_exceeds_capacity_and_is_seeded(cap in 0usize..6, seed in any::<u64>(), n in 0usize..40) {
        let mut a = ImagePool::new(cap, seed, "pool");
        let mut b = ImagePool::new(cap, seed, "pool");
        for i in 0..n {
            let x = Tensor::full(vec![1], i as f32);
            let (ra, rb) = (a.query(x.clone()), b.query(x));
            prop_assert!(a.buffer.len() <= cap);
            prop_assert!(ra.bit_eq(&rb));
        }
    }
}

#[test]
fn convergence_needs_patience_stalled_windows() {
    let mut c = Convergence::new(2, 1e-3, 2);
    for v in [1.0, 1.0, 0.5, 0.5] {
        c.end_epoch_with(v);
    }
    assert!(!c.converged());
    for v in [0.5, 0.5] {
        c.end_epoch_with(v);
    }
    assert!(!c.converged());
    c.end_epoch_with(0.4);
    c.end_epoch_with(0.4);
    assert_eq!(c.stalls, 0);
    for v in [0.4; 4] {
        c.end_epoch_with(v);
    }
    assert!(c.converged());
}

#[test]
fn convergence_averages_steps_per_epoch() {
    let mut c = Convergence::new(1, 0.1, 1);
    for v in [1.0, 3.0] {
        c.record_step(v);
    }
    assert!(!c.end_epoch());
    assert_eq!(c.last_window, Some(2.0));
    c.record_step(1.95);
    assert!(c.end_epoch());
}

// ---- trainer ----------------------------------------------------------------

fn tiny(root: &Path, merge: MergeKind, source: GuidanceSource, aggregate: AggregateKind) -> TrainingConfig {
    let mut cfg = TrainingConfig::default();
    cfg.deterministic = true;
    cfg.data.root = Some(root.to_path_buf());
    cfg.data.synthetic = Some(SyntheticConfig {
        train_per_domain: 6,
        test_per_domain: 4,
        image_size: 20,
        ..SyntheticConfig::default()
    });
    cfg.data.image_size = 16;
    cfg.data.resize_to = 20;
    cfg.model.gen_channels = 4;
    cfg.model.residual_blocks = 1;
    cfg.model.disc_channels = 4;
    cfg.model.guidance_dim = 4;
    cfg.guidance.merge = merge;
    cfg.guidance.source = source;
    cfg.guidance.aggregate = aggregate;
    cfg.train.pool_size = 3;
    cfg
}

fn trainer(cfg: TrainingConfig, run_dir: Option<&Path>) -> Trainer {
    let root = data::prepare(&cfg.data).unwrap();
    let ds = Dataset::load(&root, &cfg.data).unwrap();
    Trainer::new(cfg, ds, run_dir.map(Path::to_path_buf)).unwrap()
}

fn guided(root: &Path) -> TrainingConfig {
    tiny(root, MergeKind::Attention, GuidanceSource::Multi, AggregateKind::Weighted)
}

#[test]
fn shadow_tracks_live_and_generator_steps_leave_live_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(guided(dir.path()), None);
    for i in 0..30 {
        let (ra, rb) = t.data.train_pair(t.cfg.seed, 0, i % 6);
        let (la, lb) = (t.model.d_a.params.clone(), t.model.d_b.params.clone());
        let (sa, sb) = (t.model.shadow_a.params.clone(), t.model.shadow_b.params.clone());
        let step = t.generator_step(&ra.pixels, &rb.pixels, 2e-4, 2e-4).unwrap();
        assert!(t.model.d_a.params.values_bit_eq(&la) && t.model.d_b.params.values_bit_eq(&lb));
        assert!(!t.model.shadow_a.params.values_bit_eq(&sa) && !t.model.shadow_b.params.values_bit_eq(&sb));
        t.discriminator_step(&ra.pixels, &rb.pixels, step.fake_a, step.fake_b, 2e-4).unwrap();
        t.mix().unwrap();
        assert!(t.model.d_a.params.values_bit_eq(&t.model.shadow_a.params));
        assert!(t.model.d_b.params.values_bit_eq(&t.model.shadow_b.params));
    }
}

#[test]
fn zero_lr_discriminator_step_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(guided(dir.path()), None);
    let (ra, rb) = t.data.train_pair(t.cfg.seed, 0, 0);
    let step = t.generator_step(&ra.pixels, &rb.pixels, 0.0, 0.0).unwrap();
    let before = t.model.clone();
    t.discriminator_step(&ra.pixels, &rb.pixels, step.fake_a, step.fake_b, 0.0).unwrap();
    for (a, b) in t.model.stores().iter().zip(before.stores()) {
        assert!(a.values_bit_eq(b));
    }
}

#[test]
fn small_discriminator_step_decreases_its_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(guided(dir.path()), None);
    let (ra, rb) = t.data.train_pair(t.cfg.seed, 0, 0);
    let step = t.generator_step(&ra.pixels, &rb.pixels, 0.0, 0.0).unwrap();
    // the pool is filling, so both calls see the same fakes
    let first = t.discriminator_step(&ra.pixels, &rb.pixels, step.fake_a.clone(), step.fake_b.clone(), 1e-4).unwrap();
    let second = t.discriminator_step(&ra.pixels, &rb.pixels, step.fake_a, step.fake_b, 0.0).unwrap();
    assert!(second.d_a + second.d_b < first.d_a + first.d_b);
}

#[test]
fn frozen_concat_matches_unguided_losses() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = tiny(dir.path(), MergeKind::None, GuidanceSource::OutputDomain, AggregateKind::None);
    base.loss.lambda_reg = 0.0;
    let mut frozen = tiny(dir.path(), MergeKind::Concat, GuidanceSource::OutputDomain, AggregateKind::None);
    frozen.guidance.frozen_zero = true;
    frozen.loss.lambda_reg = 0.0;
    let (mut a, mut b) = (trainer(base, None), trainer(frozen, None));
    for _ in 0..12 {
        let (ra, rb) = (a.iterate().unwrap(), b.iterate().unwrap());
        assert!((ra.gen.total - rb.gen.total).abs() < 1e-6);
        assert!((ra.disc.d_a - rb.disc.d_a).abs() < 1e-6 && (ra.disc.d_b - rb.disc.d_b).abs() < 1e-6);
    }
}

#[test]
fn zero_max_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = guided(&dir.path().join("data"));
    cfg.train.max_epochs = 0;
    let run = dir.path().join("run");
    let mut t = trainer(cfg, Some(&run));
    assert_eq!(t.train().unwrap(), StopReason::MaxEpochs);
    assert_eq!(t.state.step, 0);
    let steps: Vec<_> = std::fs::read_dir(run.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("step-"))
        .collect();
    assert_eq!(steps, ["step-000000"]);
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap(), "");
}

#[test]
fn training_stops_at_max_steps_and_logs_each_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = guided(&dir.path().join("data"));
    cfg.train.max_steps = Some(8);
    let run = dir.path().join("run");
    let mut t = trainer(cfg, Some(&run));
    assert_eq!(t.train().unwrap(), StopReason::MaxSteps);
    assert_eq!((t.state.step, t.state.epoch, t.state.index_in_epoch), (8, 1, 2));
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 8);
    let losses = std::fs::read_to_string(run.join("losses.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(losses.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 1);
    assert!(first["loss"].is_string() && first["value"].is_number());
}

#[test]
fn resume_reproduces_the_next_steps_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = guided(&dir.path().join("data"));
    cfg.train.checkpoint_every = 5;
    let run = dir.path().join("run");
    let mut t = trainer(cfg, Some(&run));
    for _ in 0..5 {
        t.iterate().unwrap();
    }
    let expected: Vec<_> = (0..4).map(|_| t.iterate().unwrap()).collect();

    let ck = guidegan_core::training::CheckpointPaths::new(&run.join("checkpoints/step-000005"));
    let mut r = Trainer::resume_from(&ck, None).unwrap();
    assert_eq!(r.state.step, 5);
    let got: Vec<_> = (0..4).map(|_| r.iterate().unwrap()).collect();
    assert_eq!(got, expected);
    for (a, b) in t.model.stores().iter().zip(r.model.stores()) {
        assert!(a.values_bit_eq(b));
    }
}

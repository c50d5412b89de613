//! Optimizer recurrences, training-loop contracts, and the occluding step's gate.

mod common;

use distraction_core::autodiff::{Tape, Tensor};
use distraction_core::checkpoint;
use distraction_core::distraction::{distraction_step, train_distraction, StepDecision, StepEnv};
use distraction_core::optim::{
    train_baseline, train_epoch_baseline, train_step, Adam, AdamConfig, NoObserver, TrainConfig, TrainObserver,
};
use distraction_core::saliency::{grad_cam_batch, OcclusionMode};
use distraction_core::{build_small_cam_net, Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar_param(v: f32) -> Tensor<f32> {
    Tensor::new(vec![1], vec![v]).unwrap().with_requires_grad(true)
}

/// Put `d/dθ loss(θ)` into θ's gradient slot.
fn attach_grad(theta: &mut Tensor<f32>, loss: impl Fn(&mut Tape<f32>, distraction_core::Var) -> distraction_core::Var) {
    let mut tape = Tape::new();
    let x = tape.leaf(theta).unwrap();
    let y = loss(&mut tape, x);
    tape.backward(y).unwrap();
    tape.accumulate_into(x, theta).unwrap();
}

#[test]
fn adam_first_step_has_learning_rate_magnitude() {
    let mut theta = scalar_param(0.0);
    attach_grad(&mut theta, |t, x| t.sum(x).unwrap());
    let mut adam = Adam::new(AdamConfig::default());
    adam.update(&mut [("theta".into(), &mut theta)]).unwrap();
    let moved = -theta.data()[0] as f64;
    let expect = 0.00005 / (1.0 + 0.0000007);
    assert!((moved - expect).abs() < 1e-6 * expect, "{moved} vs {expect}");
    assert!(theta.grad().is_none());
}

#[test]
fn adam_zero_gradient_is_an_exact_no_op() {
    let mut theta = Tensor::new(vec![3], vec![0.1f32, -2.5, 7.0]).unwrap().with_requires_grad(true);
    let before = theta.data().to_vec();
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..5 {
        attach_grad(&mut theta, |t, x| {
            let z = t.scale(x, 0.0).unwrap();
            t.sum(z).unwrap()
        });
        adam.update(&mut [("theta".into(), &mut theta)]).unwrap();
    }
    assert_eq!(theta.data(), before.as_slice());
}

/// Independent re-implementation of the recurrences, in f64.
fn reference_adam(theta0: f64, steps: usize, cfg: AdamConfig) -> Vec<f64> {
    let (a, b1, b2, e) = (cfg.lr as f64, cfg.beta1 as f64, cfg.beta2 as f64, cfg.eps as f64);
    let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = 2.0 * th;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        th -= a * mh / (vh.sqrt() + e);
        out.push(th);
    }
    out
}

#[test]
fn adam_three_steps_on_a_parabola_match_reference() {
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let expect = reference_adam(1.5, 3, cfg);
    let mut theta = scalar_param(1.5);
    let mut adam = Adam::new(cfg);
    for e in expect {
        attach_grad(&mut theta, |t, x| {
            let sq = t.mul(x, x).unwrap();
            t.sum(sq).unwrap()
        });
        adam.update(&mut [("theta".into(), &mut theta)]).unwrap();
        let got = theta.data()[0] as f64;
        assert!((got - e).abs() <= 1e-6 * e.abs().max(1.0), "{got} vs {e}");
    }
    assert_eq!(adam.steps(), 3);
    assert!(adam.second_moments()[0][0] >= 0.0);
}

#[test]
fn non_finite_gradient_aborts_with_parameter_name() {
    let mut theta = scalar_param(1e-30);
    attach_grad(&mut theta, |t, x| {
        let a = t.leaf(&Tensor::scalar(1e30f32).reshape(vec![1]).unwrap()).unwrap();
        let y = t.mul(x, a).unwrap();
        let z = t.mul(y, a).unwrap();
        t.sum(z).unwrap()
    });
    let before = theta.data().to_vec();
    let err = Adam::new(AdamConfig::default())
        .update(&mut [("conv9.weight".into(), &mut theta)])
        .unwrap_err();
    assert!(matches!(&err, Error::NonFiniteGradient(n) if n == "conv9.weight"), "{err}");
    assert_eq!(theta.data(), before.as_slice());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (train, _, _) = common::tiny_splits(20, 1);
    let mut model = build_small_cam_net(3, 2, 4).unwrap();
    let before = checkpoint::encode(&model);
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        },
        ..common::quick_config(1)
    };
    let mut adam = Adam::new(cfg.adam);
    train_epoch_baseline(&mut model, &mut adam, &train, &cfg, 1).unwrap();
    assert_eq!(checkpoint::encode(&model), before);
}

#[test]
fn repeated_batch_loss_decreases_monotonically() {
    let (train, _, _) = common::tiny_splits(20, 1);
    let idx: Vec<usize> = (0..8).collect();
    let (images, labels) = train.batch(&idx).unwrap();
    let mut model = build_small_cam_net(3, 2, 2).unwrap();
    let mut adam = Adam::new(AdamConfig {
        lr: 1e-4,
        ..AdamConfig::default()
    });
    let losses: Vec<f64> = (0..10)
        .map(|_| train_step(&mut model, &mut adam, &images, &labels).unwrap().loss)
        .collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn epoch_statistics_are_reproducible() {
    let (train, _, _) = common::tiny_splits(20, 1);
    let cfg = TrainConfig {
        augmentation: Default::default(),
        ..common::quick_config(1)
    };
    let run = || {
        let mut model = build_small_cam_net(3, 2, 4).unwrap();
        let mut adam = Adam::new(cfg.adam);
        let stats = train_epoch_baseline(&mut model, &mut adam, &train, &cfg, 1).unwrap();
        (stats, checkpoint::encode(&model))
    };
    assert_eq!(run(), run());
}

#[test]
fn early_stopping_bounds_the_epoch_count() {
    let (train, val, _) = common::tiny_splits(20, 1);
    let cfg = TrainConfig {
        patience: 2,
        ..common::quick_config(40)
    };
    let out = train_baseline(build_small_cam_net(3, 2, 0).unwrap(), &train, &val, &cfg, &mut NoObserver).unwrap();
    let last_improvement = out
        .history
        .iter()
        .fold((0, f64::NEG_INFINITY), |(e, best), r| if r.val_acc > best { (r.epoch, r.val_acc) } else { (e, best) })
        .0;
    assert!(out.history.len() <= last_improvement + cfg.patience);
    assert_eq!(out.best_epoch, last_improvement);
    assert!(out.stopped_early || out.history.len() == cfg.max_epochs);
}

#[derive(Default)]
struct Recorder {
    decisions: Vec<StepDecision>,
    epochs: usize,
}

impl TrainObserver for Recorder {
    fn on_epoch(&mut self, _: &distraction_core::optim::EpochRecord) -> Result<()> {
        self.epochs += 1;
        Ok(())
    }

    fn on_step(&mut self, d: &StepDecision, _: Option<&Tensor<f32>>) -> Result<()> {
        self.decisions.push(d.clone());
        Ok(())
    }
}

#[test]
fn gate_fires_at_rate_p_and_replays_identically() {
    let (train, val, _) = common::tiny_splits(30, 1);
    // 36 training images in batches of 4 → 9 steps per epoch
    let cfg = TrainConfig {
        batch_size: 4,
        p: 0.25,
        ..common::quick_config(56)
    };
    let mut rec = Recorder::default();
    let out = train_distraction(build_small_cam_net(3, 2, 0).unwrap(), &train, &val, &cfg, &mut rec).unwrap();
    let n = rec.decisions.len();
    assert!(n >= 500, "{n} steps");
    assert_eq!(n as u64, out.steps);
    assert_eq!(rec.epochs, out.history.len());
    let applied = rec.decisions.iter().filter(|d| d.applied).count();
    let rate = applied as f64 / n as f64;
    let bound = 3.0 * (0.25f64 * 0.75 / n as f64).sqrt();
    assert!((rate - 0.25).abs() <= bound, "rate {rate} outside 0.25 ± {bound}");
    for d in &rec.decisions {
        assert_eq!(d.applied, d.r <= 0.25);
        assert!(d.occluded_fractions.iter().all(|f| (0.0..=1.0).contains(f)));
    }

    let short = TrainConfig {
        max_epochs: 3,
        ..cfg
    };
    let flags = || {
        let mut rec = Recorder::default();
        train_distraction(build_small_cam_net(3, 2, 0).unwrap(), &train, &val, &short, &mut rec).unwrap();
        rec.decisions
    };
    assert_eq!(flags(), flags());
}

#[test]
fn p_zero_and_mode_off_reproduce_the_baseline_exactly() {
    let (train, val, _) = common::tiny_splits(20, 2);
    let base_cfg = TrainConfig {
        augmentation: Default::default(),
        ..common::quick_config(3)
    };
    let hash_before = train.content_hash();
    let baseline = train_baseline(build_small_cam_net(3, 2, 8).unwrap(), &train, &val, &base_cfg, &mut NoObserver).unwrap();
    for cfg in [
        TrainConfig { p: 0.0, ..base_cfg.clone() },
        TrainConfig {
            occlusion_mode: OcclusionMode::Off,
            ..base_cfg.clone()
        },
    ] {
        let mut rec = Recorder::default();
        let d = train_distraction(build_small_cam_net(3, 2, 8).unwrap(), &train, &val, &cfg, &mut rec).unwrap();
        assert!(rec.decisions.iter().all(|d| !d.applied));
        assert_eq!(d.history, baseline.history);
        assert_eq!(checkpoint::encode(&d.model), checkpoint::encode(&baseline.model));
    }
    assert_eq!(train.content_hash(), hash_before);
}

#[test]
fn applied_step_occludes_exactly_the_pixels_above_threshold() {
    let (train, _, _) = common::tiny_splits(20, 2);
    let idx: Vec<usize> = (0..6).collect();
    let (images, labels) = train.batch(&idx).unwrap();
    let cfg = TrainConfig {
        p: 1.0,
        ..common::quick_config(1)
    };
    let mut model = build_small_cam_net(3, 2, 3).unwrap();
    let mut adam = Adam::new(cfg.adam);
    // warm up so heat maps are not degenerate
    for _ in 0..5 {
        train_step(&mut model, &mut adam, &images, &labels).unwrap();
    }
    let mut frozen = model.clone();
    let maps = grad_cam_batch(&mut frozen, &images, &labels).unwrap();
    let env = StepEnv {
        config: &cfg,
        epoch: 1,
        step: 0,
        batch_index: 0,
    };
    let mut gate = ChaCha8Rng::seed_from_u64(0);
    let (_, decision, occluded) = distraction_step(&mut model, &mut adam, &images, &labels, &env, &mut gate).unwrap();
    assert!(decision.applied);
    let occluded = occluded.unwrap();
    let plane = 32 * 32;
    for (i, map) in maps.iter().enumerate() {
        let selected: Vec<bool> = map.normalized.data().iter().map(|&v| v > 0.85).collect();
        let expect = selected.iter().filter(|&&s| s).count();
        assert_eq!(decision.occluded_pixels[i], expect);
        let (orig, occ) = (images.outer(i).unwrap(), occluded.outer(i).unwrap());
        for px in 0..plane {
            for c in 0..3 {
                let (o, v) = (orig.data()[c * plane + px], occ.data()[c * plane + px]);
                if selected[px] {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, o);
                }
            }
        }
    }
}

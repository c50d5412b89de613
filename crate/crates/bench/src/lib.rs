//! Benchmark bodies, kept in a library so `cargo test` type-checks them.

use criterion::{BenchmarkId, Criterion};
use distraction_core::data::{split, synth_generate, AugmentConfig};
use distraction_core::distraction::StepEnv;
use distraction_core::optim::{train_step, Adam, AdamConfig};
use distraction_core::rng::{stream, stream_rng};
use distraction_core::saliency::grad_cam_batch;
use distraction_core::{build_small_cam_net, distraction_step, SynthSpec, Tape, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// A batch of 16 synthetic 64×64 images with labels.
pub fn synth_batch() -> (Tensor<f32>, Vec<usize>) {
    let ds = synth_generate(&SynthSpec {
        per_class: 4,
        ..SynthSpec::default()
    })
    .unwrap();
    let idx: Vec<usize> = (0..16).collect();
    ds.batch(&idx).unwrap()
}

pub fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for (cin, cout, side) in [(3, 16, 64), (16, 32, 32), (32, 64, 16)] {
        let x = random(&[16, cin, side, side], 1);
        let w = random(&[cout, cin, 3, 3], 2).with_requires_grad(true);
        let b = random(&[cout], 3).with_requires_grad(true);
        let id = format!("{cin}x{side}x{side}->{cout}");
        group.bench_with_input(BenchmarkId::new("forward", &id), &x, |bench, x| {
            bench.iter(|| {
                let mut tape = Tape::<f32>::without_param_grads();
                let (xv, wv, bv) = (tape.leaf(x).unwrap(), tape.leaf(&w).unwrap(), tape.leaf(&b).unwrap());
                tape.conv2d(xv, wv, bv, 1, 1).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", &id), &x, |bench, x| {
            bench.iter(|| {
                let mut tape = Tape::<f32>::new();
                let (xv, wv, bv) = (tape.leaf(x).unwrap(), tape.leaf(&w).unwrap(), tape.leaf(&b).unwrap());
                let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
                let s = tape.sum(y).unwrap();
                tape.backward(s).unwrap();
            })
        });
    }
    group.finish();
}

pub fn grad_cam(c: &mut Criterion) {
    let (images, labels) = synth_batch();
    let mut model = build_small_cam_net(3, 4, 0).unwrap();
    c.bench_function("grad_cam_batch/16x64x64", |bench| {
        bench.iter(|| {
            let maps = grad_cam_batch(&mut model, &images, &labels).unwrap();
            model.clear_capture();
            maps
        })
    });
}

pub fn training_step(c: &mut Criterion) {
    let (images, labels) = synth_batch();
    let config = TrainConfig {
        p: 0.99,
        augmentation: AugmentConfig::none(),
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train_step/16x64x64");
    group.sample_size(20);
    group.bench_function("baseline", |bench| {
        let mut model = build_small_cam_net(3, 4, 0).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        bench.iter(|| train_step(&mut model, &mut adam, &images, &labels).unwrap())
    });
    group.bench_function("occluding", |bench| {
        let mut model = build_small_cam_net(3, 4, 0).unwrap();
        let mut adam = Adam::new(config.adam);
        // gate draws from (0, 1) and almost always fall under p = 0.99
        let mut gate = stream_rng(0, stream::GATE);
        let mut step = 0;
        bench.iter(|| {
            let env = StepEnv {
                config: &config,
                epoch: 1,
                step,
                batch_index: 0,
            };
            step += 1;
            distraction_step(&mut model, &mut adam, &images, &labels, &env, &mut gate).unwrap()
        })
    });
    group.finish();
}

/// Dataset split on the default 800-image benchmark.
pub fn data(c: &mut Criterion) {
    let ds = synth_generate(&SynthSpec::default()).unwrap();
    c.bench_function("split/800", |bench| bench.iter(|| split(&ds, [0.6, 0.2, 0.2], 3).unwrap()));
}

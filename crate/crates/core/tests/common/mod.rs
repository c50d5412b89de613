#![allow(dead_code)]

use std::sync::OnceLock;

use distraction_core::data::{split, synth_generate, AugmentConfig, Dataset, SynthSpec};
use distraction_core::optim::{train_baseline, AdamConfig, NoObserver, TrainConfig};
use distraction_core::{build_small_cam_net, Model};

/// Small 32×32 benchmark that trains in seconds.
pub fn tiny_spec(per_class: usize, redundancy: usize) -> SynthSpec {
    SynthSpec {
        num_classes: 2,
        per_class,
        canvas: 32,
        cue_size: 5,
        redundancy,
        clutter: 2,
        seed: 11,
    }
}

pub fn tiny_splits(per_class: usize, redundancy: usize) -> (Dataset, Dataset, Dataset) {
    let ds = synth_generate(&tiny_spec(per_class, redundancy)).unwrap();
    let s = split(&ds, [0.6, 0.2, 0.2], 3).unwrap();
    (ds.subset(&s.train), ds.subset(&s.val), ds.subset(&s.test))
}

pub fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        input_size: 32,
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        max_epochs: epochs,
        patience: epochs,
        augmentation: AugmentConfig::none(),
        seed: 5,
        ..TrainConfig::default()
    }
}

/// A 2-class model trained once per test binary.
pub fn trained_toy() -> (Model<f32>, Dataset) {
    static TOY: OnceLock<(Model<f32>, Dataset)> = OnceLock::new();
    TOY.get_or_init(|| {
        let (train, val, test) = tiny_splits(100, 1);
        let out = train_baseline(build_small_cam_net(3, 2, 1).unwrap(), &train, &val, &quick_config(30), &mut NoObserver)
            .unwrap();
        (out.model, test)
    })
    .clone()
}

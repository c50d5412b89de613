//! Grad-CAM against the occlusion-sensitivity reference, plus mask and
//! occlusion invariants.

mod common;

use distraction_core::autodiff::Tensor;
use distraction_core::field::Field;
use distraction_core::metrics::argmax_rows;
use distraction_core::saliency::{
    grad_cam, grad_cam_batch, min_max_norm, occlude, occlusion_sensitivity, threshold_mask, OcclusionMask,
    OcclusionMode,
};
use distraction_core::{build_small_cam_net, Model};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[test]
fn grad_cam_ranking_agrees_with_occlusion_sensitivity() {
    let (mut model, test) = common::trained_toy();
    let patch = 8;
    let mut total = 0.0;
    for s in &test.samples {
        let map = grad_cam(&mut model, &s.image, s.label).unwrap();
        let drops = occlusion_sensitivity(&model, &s.image, s.label, patch, patch).unwrap();
        let mut cells = Vec::new();
        for cy in 0..drops.height() {
            for cx in 0..drops.width() {
                let mut acc = 0.0;
                for y in cy * patch..(cy + 1) * patch {
                    for x in cx * patch..(cx + 1) * patch {
                        acc += map.normalized.get(y, x) as f64;
                    }
                }
                cells.push(acc);
            }
        }
        let d: Vec<f64> = drops.data().iter().map(|&v| v as f64).collect();
        total += spearman(&cells, &d);
    }
    let mean = total / test.len() as f64;
    assert!(mean > 0.0, "mean Spearman correlation {mean:.3}");
}

#[test]
fn batched_grad_cam_matches_single_image_calls() {
    let (mut model, test) = common::trained_toy();
    let idx: Vec<usize> = (0..6).collect();
    let (images, labels) = test.batch(&idx).unwrap();
    let maps = grad_cam_batch(&mut model, &images, &labels).unwrap();
    for (i, m) in maps.iter().enumerate() {
        let single = grad_cam(&mut model, &test.samples[i].image, labels[i]).unwrap();
        for (a, b) in m.raw.data().iter().zip(single.raw.data()) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1.0));
        }
    }
}

#[test]
fn heat_map_invariants_on_a_trained_model() {
    let (mut model, test) = common::trained_toy();
    for s in test.samples.iter().take(10) {
        let map = grad_cam(&mut model, &s.image, s.label).unwrap();
        assert!(map.raw.data().iter().all(|&v| v >= 0.0));
        assert_eq!((map.normalized.height(), map.normalized.width()), (32, 32));
        assert!(map.normalized.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        if map.raw.max() > map.raw.min() {
            assert_eq!(map.normalized.max(), 1.0);
            assert_eq!(map.normalized.min(), 0.0);
        }
    }
}

/// Doubling the final layer doubles every target gradient; the normalized map must not move.
#[test]
fn normalization_removes_upstream_scale() {
    let (model, test) = common::trained_toy();
    let mut scaled: Model<f32> = model.clone();
    let values = scaled
        .params()
        .into_iter()
        .map(|(n, t)| {
            let t = if n.starts_with("fc.") {
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * 2.0).collect()).unwrap()
            } else {
                t.clone()
            };
            (n, t)
        })
        .collect();
    scaled.load_params(values).unwrap();
    let mut model = model;
    for s in test.samples.iter().take(8) {
        let a = grad_cam(&mut model, &s.image, s.label).unwrap();
        let b = grad_cam(&mut scaled, &s.image, s.label).unwrap();
        assert_eq!(a.normalized.argmax(), b.normalized.argmax());
    }
}

#[test]
fn sensitivity_of_an_input_independent_model_is_zero() {
    let mut net = build_small_cam_net(3, 2, 0).unwrap();
    let values = net
        .params()
        .into_iter()
        .map(|(n, t)| {
            let t = if n == "conv1.weight" { Tensor::zeros(t.shape().to_vec()) } else { t.clone() };
            (n, t)
        })
        .collect();
    net.load_params(values).unwrap();
    let img = Tensor::full(vec![3, 20, 20], 0.7f32);
    let f = occlusion_sensitivity(&net, &img, 1, 4, 2).unwrap();
    assert!(f.data().iter().all(|&v| v == 0.0));
}

#[test]
fn full_patch_gives_clean_minus_blank() {
    let (model, test) = common::trained_toy();
    let img = &test.samples[0].image;
    let f = occlusion_sensitivity(&model, img, 0, 32, 1).unwrap();
    assert_eq!((f.height(), f.width()), (1, 1));
    let clean = model.logits(&Tensor::stack(std::slice::from_ref(img)).unwrap()).unwrap().data()[0];
    let blank = model.logits(&Tensor::zeros(vec![1, 3, 32, 32])).unwrap().data()[0];
    assert!((f.data()[0] - (clean - blank)).abs() < 1e-5);
}

#[test]
fn sensitivity_strides_agree_at_shared_positions() {
    let (model, test) = common::trained_toy();
    let img = &test.samples[1].image;
    let fine = occlusion_sensitivity(&model, img, 1, 8, 1).unwrap();
    let coarse = occlusion_sensitivity(&model, img, 1, 8, 8).unwrap();
    for cy in 0..coarse.height() {
        for cx in 0..coarse.width() {
            assert_eq!(coarse.get(cy, cx), fine.get(cy * 8, cx * 8));
        }
    }
}

#[test]
fn trained_toy_is_accurate() {
    let (model, test) = common::trained_toy();
    let idx: Vec<usize> = (0..test.len()).collect();
    let (images, labels) = test.batch(&idx).unwrap();
    let preds = argmax_rows(&model.logits(&images).unwrap());
    let hits = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    assert!(hits as f64 / labels.len() as f64 >= 0.9, "{hits}/{}", labels.len());
}

fn field_strategy() -> impl Strategy<Value = Field> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        prop::collection::vec(-5.0f32..5.0, h * w).prop_map(move |d| Field::new(h, w, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn min_max_norm_lands_in_unit_interval(f in field_strategy()) {
        let n = min_max_norm(&f);
        prop_assert!(n.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        if f.max() > f.min() {
            let twice = min_max_norm(&n);
            for (a, b) in twice.data().iter().zip(n.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn occluded_count_equals_strict_threshold_count(
        f in field_strategy(), th in 0.01f32..0.99, mode in prop::sample::select(vec![OcclusionMode::Zero, OcclusionMode::One, OcclusionMode::Random]),
    ) {
        let n = min_max_norm(&f);
        let mask = threshold_mask(&n, th).unwrap();
        let expect = n.data().iter().filter(|&&v| v > th).count();
        prop_assert_eq!(mask.count(), expect);
        let (h, w) = (n.height(), n.width());
        // mid-grey image so zero and one are both visible changes
        let img = Tensor::full(vec![3, h, w], 0.5f32);
        let out = occlude(&img, &mask, mode, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let plane = h * w;
        let mut changed = 0;
        for px in 0..plane {
            let hit = (0..3).any(|c| out.data()[c * plane + px] != 0.5);
            if hit { changed += 1; }
            if !mask.selected()[px] {
                prop_assert!((0..3).all(|c| out.data()[c * plane + px] == 0.5));
            }
        }
        if mode != OcclusionMode::Random {
            prop_assert_eq!(changed, expect);
        }
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(img.data().iter().filter(|&&v| v != 0.5).count(), 0);
    }

    #[test]
    fn empty_mask_is_identity(h in 1usize..10, w in 1usize..10) {
        let img = Tensor::new(vec![2, h, w], (0..2 * h * w).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let out = occlude(&img, &OcclusionMask::empty(h, w), OcclusionMode::One, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(out, img);
    }
}

//! The occluding mini-batch step and its training driver.
//!
//! With probability `p` a batch is replaced, before its gradient step, by a
//! copy in which each image loses the pixels its current Grad-CAM map rates
//! above `th` for the true label.

use std::fmt;

use rand::distr::Open01;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::optim::{fit, train_step, Adam, StepStats, TrainConfig, TrainObserver, TrainOutcome};
use crate::rng::{mix, stream, stream_rng, StreamRng};
use crate::saliency::{grad_cam_batch, occlude, threshold_mask, HeatMap, OcclusionMask, OcclusionMode};

/// Record of the gate for one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDecision {
    pub step: u64,
    pub epoch: u64,
    pub batch: usize,
    /// Uniform draw on the open interval (0, 1).
    pub r: f64,
    pub applied: bool,
    /// Occluded pixels per image (empty when not applied).
    pub occluded_pixels: Vec<usize>,
    /// Occluded fraction per image (empty when not applied).
    pub occluded_fractions: Vec<f64>,
}

impl StepDecision {
    pub const HEADER: &'static str = "step\tr\tapplied\tmean_occluded_fraction";

    pub fn mean_fraction(&self) -> f64 {
        if self.occluded_fractions.is_empty() {
            0.0
        } else {
            self.occluded_fractions.iter().sum::<f64>() / self.occluded_fractions.len() as f64
        }
    }
}

impl fmt::Display for StepDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{}\t{:.6}",
            self.step,
            self.r,
            u8::from(self.applied),
            self.mean_fraction()
        )
    }
}

/// Occluded copy of a `[N, C, H, W]` batch together with the maps and masks
/// that produced it.
#[derive(Clone, Debug)]
pub struct OccludedBatch {
    pub images: Tensor<f32>,
    pub heat_maps: Vec<HeatMap>,
    pub masks: Vec<OcclusionMask>,
}

/// Grad-CAM every image against its label with the current weights, then
/// occlude pixels whose normalized weight is strictly above `th`.
///
/// `rng_for(i)` supplies the generator for image `i`; only random mode draws from it.
pub fn occlude_batch(
    model: &mut Model<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    th: f32,
    mode: OcclusionMode,
    mut rng_for: impl FnMut(usize) -> StreamRng,
) -> Result<OccludedBatch> {
    let heat_maps = grad_cam_batch(model, images, labels)?;
    model.clear_capture();
    let mut masks = Vec::with_capacity(heat_maps.len());
    let mut occluded = Vec::with_capacity(heat_maps.len());
    for (i, map) in heat_maps.iter().enumerate() {
        let mask = threshold_mask(&map.normalized, th)?;
        occluded.push(occlude(&images.outer(i)?, &mask, mode, &mut rng_for(i))?);
        masks.push(mask);
    }
    Ok(OccludedBatch {
        images: Tensor::stack(&occluded)?,
        heat_maps,
        masks,
    })
}

/// Per-step inputs that do not change across the run.
pub struct StepEnv<'a> {
    pub config: &'a TrainConfig,
    pub epoch: u64,
    pub step: u64,
    pub batch_index: usize,
}

/// Draw the gate, occlude the batch if it fires, then take the usual gradient step.
///
/// Returns the step statistics, the decision, and the modified batch when one was built.
/// The input batch is never mutated.
pub fn distraction_step<R: Rng + ?Sized>(
    model: &mut Model<f32>,
    adam: &mut Adam,
    images: &Tensor<f32>,
    labels: &[usize],
    env: &StepEnv<'_>,
    gate: &mut R,
) -> Result<(StepStats, StepDecision, Option<Tensor<f32>>)> {
    let cfg = env.config;
    let r: f64 = gate.sample(Open01);
    let applied = r <= cfg.p && cfg.occlusion_mode != OcclusionMode::Off;
    let mut decision = StepDecision {
        step: env.step,
        epoch: env.epoch,
        batch: env.batch_index,
        r,
        applied,
        occluded_pixels: Vec::new(),
        occluded_fractions: Vec::new(),
    };
    if !applied {
        let stats = train_step(model, adam, images, labels)?;
        return Ok((stats, decision, None));
    }
    let seed = cfg.seed;
    let (epoch, batch) = (env.epoch, env.batch_index as u64);
    let occluded = occlude_batch(model, images, labels, cfg.th, cfg.occlusion_mode, |i| {
        stream_rng(mix(&[seed, epoch, batch, i as u64]), stream::OCCLUDE)
    })?;
    decision.occluded_pixels = occluded.masks.iter().map(OcclusionMask::count).collect();
    decision.occluded_fractions = occluded.masks.iter().map(OcclusionMask::fraction).collect();
    let stats = train_step(model, adam, &occluded.images, labels)?;
    Ok((stats, decision, Some(occluded.images)))
}

/// Full training run with the occluding step. Validation uses clean images and
/// the returned model is the best-validation checkpoint.
pub fn train_distraction(
    model: Model<f32>,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    if config.occlusion_mode != OcclusionMode::Off && !(0.0..1.0).contains(&config.p) {
        return Err(Error::Config(format!("p must lie in [0, 1), got {}", config.p)));
    }
    let mut gate = stream_rng(config.seed, stream::GATE);
    fit(model, train, val, config, observer, |model, adam, ctx, observer| {
        let env = StepEnv {
            config,
            epoch: ctx.epoch,
            step: ctx.step,
            batch_index: ctx.batch.index,
        };
        let (stats, decision, occluded) =
            distraction_step(model, adam, &ctx.batch.images, &ctx.batch.labels, &env, &mut gate)?;
        observer.on_step(&decision, occluded.as_ref())?;
        Ok(stats)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decision_line() {
        let d = StepDecision {
            step: 7,
            epoch: 1,
            batch: 7,
            r: 0.125,
            applied: true,
            occluded_pixels: vec![1, 3],
            occluded_fractions: vec![0.25, 0.75],
        };
        assert_eq!(d.to_string(), "7\t0.125000\t1\t0.500000");
    }
}

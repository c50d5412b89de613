//! Adam, early stopping and the epoch loop shared by both trainers.

use std::fmt;

use crate::autodiff::{Tape, Tensor};
use crate::data::{epoch_batches, AugmentConfig, Batch, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{argmax_rows, predict};
use crate::nn::Model;
use crate::saliency::OcclusionMode;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.00005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 0.0000007,
        }
    }
}

/// Adam with bias correction. Moment buffers are created on the first step
/// and follow the model's parameter order afterwards.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.v
    }

    /// Apply one update from the gradients stored on the parameters, then clear them.
    ///
    /// Parameters without a gradient are left alone. Every gradient is checked
    /// before anything is written, so a NaN leaves the model untouched.
    pub fn step(&mut self, model: &mut Model<f32>) -> Result<()> {
        self.update(&mut model.params_mut())
    }

    /// [`Adam::step`] over an explicit named parameter list.
    pub fn update(&mut self, params: &mut [(String, &mut Tensor<f32>)]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, (_, p))| m.len() != p.numel()) {
            return Err(Error::State("optimizer state does not match the model's parameters".into()));
        }
        for (name, p) in params.iter() {
            if p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((_, p), (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let Some(g) = p.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let data = p.data_mut();
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.clear_grad();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    Stop,
}

/// Patience counter on validation accuracy. Ties count as no improvement.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    best: Option<f64>,
    since_improvement: usize,
    patience: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            best: None,
            since_improvement: 0,
            patience,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn since_improvement(&self) -> usize {
        self.since_improvement
    }

    pub fn update(&mut self, val_acc: f64) -> Progress {
        if self.best.is_none_or(|b| val_acc > b) {
            self.best = Some(val_acc);
            self.since_improvement = 0;
            return Progress::Improved;
        }
        self.since_improvement += 1;
        if self.since_improvement >= self.patience {
            Progress::Stop
        } else {
            Progress::Stalled
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub input_size: usize,
    pub adam: AdamConfig,
    pub patience: usize,
    pub max_epochs: usize,
    /// Probability that a mini-batch is occluded before its gradient step.
    pub p: f64,
    pub th: f32,
    pub occlusion_mode: OcclusionMode,
    pub augmentation: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            input_size: 64,
            adam: AdamConfig::default(),
            patience: 30,
            max_epochs: 200,
            p: 0.25,
            th: 0.85,
            occlusion_mode: OcclusionMode::Zero,
            augmentation: AugmentConfig::default(),
            seed: 42,
        }
    }
}

impl TrainConfig {
    /// Check ranges; returns warnings for legal but unusual settings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.input_size < 8 {
            return bad(format!("image_size {} is too small for the network", self.input_size));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be at least 1".into());
        }
        if self.occlusion_mode != OcclusionMode::Off && !(0.0..1.0).contains(&self.p) {
            return bad(format!("p must lie in [0, 1), got {}", self.p));
        }
        if !(self.th > 0.0 && self.th < 1.0) {
            return bad(format!("th must lie in (0, 1), got {}", self.th));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.adam;
        if !(lr >= 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return bad(format!("invalid Adam settings {:?}", self.adam));
        }
        if let Some((lo, hi)) = self.augmentation.brightness {
            if !(lo > 0.0 && lo <= hi) {
                return bad(format!("brightness range {lo}:{hi} must satisfy 0 < lo <= hi"));
            }
        }
        if self.augmentation.rotation_deg < 0.0 || self.augmentation.channel_shift < 0.0 {
            return bad("augmentation ranges must be non-negative".into());
        }
        let mut warnings = Vec::new();
        if self.p > 0.5 && self.occlusion_mode != OcclusionMode::Off {
            warnings.push(format!("p = {} is above 0.5; most batches will be occluded", self.p));
        }
        Ok(warnings)
    }
}

/// Loss and hit count of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub size: usize,
}

/// Forward, cross-entropy, backward and one Adam update on a stacked batch.
pub fn train_step(model: &mut Model<f32>, adam: &mut Adam, images: &Tensor<f32>, labels: &[usize]) -> Result<StepStats> {
    let mut tape = Tape::new();
    let x = tape.leaf(images)?;
    let pass = model.forward(&mut tape, x, false)?;
    let correct = argmax_rows(tape.value(pass.logits)?)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
    let loss_value = tape.value(loss)?.item()? as f64;
    tape.backward(loss)?;
    model.collect_gradients(&tape, &pass)?;
    adam.step(model)?;
    Ok(StepStats {
        loss: loss_value,
        correct,
        size: labels.len(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Default)]
struct Tally {
    loss: f64,
    correct: usize,
    seen: usize,
}

impl Tally {
    fn add(&mut self, s: StepStats) {
        self.loss += s.loss * s.size as f64;
        self.correct += s.correct;
        self.seen += s.size;
    }

    fn stats(&self) -> EpochStats {
        let n = self.seen.max(1) as f64;
        EpochStats {
            mean_loss: self.loss / n,
            accuracy: self.correct as f64 / n,
        }
    }
}

/// One classical pass over shuffled, augmented training batches.
pub fn train_epoch_baseline(
    model: &mut Model<f32>,
    adam: &mut Adam,
    train: &Dataset,
    config: &TrainConfig,
    epoch: u64,
) -> Result<EpochStats> {
    let mut tally = Tally::default();
    for batch in epoch_batches(train, config.batch_size, config.augmentation, config.seed, epoch) {
        let batch = batch?;
        tally.add(train_step(model, adam, &batch.images, &batch.labels)?);
    }
    Ok(tally.stats())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch\ttrain_loss\ttrain_acc\tval_acc";
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.train_loss, self.train_acc, self.val_acc
        )
    }
}

/// Callbacks fired by the training loop. All methods default to no-ops.
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    fn on_step(&mut self, _decision: &crate::distraction::StepDecision, _batch: Option<&Tensor<f32>>) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best validation accuracy.
    pub model: Model<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub stopped_early: bool,
    /// Total optimizer steps taken.
    pub steps: u64,
}

/// Context handed to a step function.
pub struct StepContext<'a> {
    pub epoch: u64,
    /// Global step index, counted from 0 across epochs.
    pub step: u64,
    pub batch: &'a Batch,
}

/// Epoch loop with validation, early stopping and best-checkpoint tracking.
/// `step` performs one optimizer update on a batch.
pub fn fit<F>(
    mut model: Model<f32>,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
    mut step: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&mut Model<f32>, &mut Adam, &StepContext<'_>, &mut dyn TrainObserver) -> Result<StepStats>,
{
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation splits must both be non-empty".into()));
    }
    if train.num_classes() != model.num_classes() {
        return Err(Error::Data(format!(
            "dataset has {} classes, model has {}",
            train.num_classes(),
            model.num_classes()
        )));
    }
    let mut adam = Adam::new(config.adam);
    let mut stop = EarlyStop::new(config.patience);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut steps = 0u64;
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let mut tally = Tally::default();
        for batch in epoch_batches(train, config.batch_size, config.augmentation, config.seed, epoch as u64) {
            let batch = batch?;
            let ctx = StepContext {
                epoch: epoch as u64,
                step: steps,
                batch: &batch,
            };
            tally.add(step(&mut model, &mut adam, &ctx, observer)?);
            steps += 1;
        }
        let stats = tally.stats();
        let val_acc = accuracy(&model, val, config.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: stats.mean_loss,
            train_acc: stats.accuracy,
            val_acc,
        };
        observer.on_epoch(&record)?;
        history.push(record);
        match stop.update(val_acc) {
            Progress::Improved => {
                best = model.clone();
                best_epoch = epoch;
            }
            Progress::Stalled => {}
            Progress::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    best.clear_capture();
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        best_val_acc: stop.best().unwrap_or(0.0),
        stopped_early,
        steps,
    })
}

/// Classical training: every batch is used as-is.
pub fn train_baseline(
    model: Model<f32>,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    fit(model, train, val, config, observer, |model, adam, ctx, _| {
        train_step(model, adam, &ctx.batch.images, &ctx.batch.labels)
    })
}

/// Fraction of clean samples classified correctly.
pub fn accuracy(model: &Model<f32>, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    let preds = predict(model, dataset, batch_size)?;
    let hits = preds.iter().zip(&dataset.samples).filter(|(p, s)| **p == s.label).count();
    Ok(hits as f64 / dataset.len().max(1) as f64)
}

//! Saliency-guided occlusion ("distraction") training for small CNN classifiers.
//!
//! During mini-batch training, with probability `p` the trainer computes
//! Grad-CAM heat maps of the current model against the ground-truth labels,
//! occludes every pixel whose normalized weight exceeds `th`, and then takes
//! the usual gradient step on the modified batch.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod distraction;
pub mod error;
pub mod field;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pnm;
pub mod rng;
pub mod saliency;

pub use autodiff::{Real, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use data::{Dataset, SynthSpec};
pub use distraction::{distraction_step, train_distraction, StepDecision};
pub use metrics::{evaluate, EvalReport};
pub use nn::{build_small_cam_net, Model};
pub use optim::{train_baseline, TrainConfig, TrainOutcome};
pub use saliency::{grad_cam, HeatMap, OcclusionMode};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::run::mask_targets;
use crate::error::Result;
use crate::losses::{combined_loss_grad, LossConfig, LossInputs, MaskPair, OneHotTarget};
use crate::model::{Model, OutputGrads, Prediction};
use crate::nn::{Entry, EntryMut, Mode, Module};
use crate::tensor::{Scalar, Tensor};
use crate::types::SegmentationMap;

/// A scalar function of the model outputs with its output gradients.
pub trait Objective<T> {
    fn value_and_grads(&self, pred: &Prediction<T>) -> Result<(T, OutputGrads<T>)>;
}

/// The training loss against fixed annotations.
pub struct CombinedObjective<T> {
    target: OneHotTarget,
    object: Tensor<T>,
    arm: Tensor<T>,
    cfg: LossConfig,
}

impl<T: Scalar> CombinedObjective<T> {
    pub fn new(masks: &[SegmentationMap], num_classes: usize, cfg: LossConfig) -> Result<Self> {
        let (object, arm) = mask_targets(masks)?;
        Ok(CombinedObjective {
            target: OneHotTarget::from_maps(masks, num_classes)?,
            object,
            arm,
            cfg,
        })
    }
}

impl<T: Scalar> Objective<T> for CombinedObjective<T> {
    fn value_and_grads(&self, pred: &Prediction<T>) -> Result<(T, OutputGrads<T>)> {
        let inputs = LossInputs {
            affordance: &pred.affordance,
            affordance_target: &self.target,
            object: pred.object.as_ref().map(|p| MaskPair {
                pred: p,
                target: &self.object,
            }),
            arm: pred.arm.as_ref().map(|p| MaskPair {
                pred: p,
                target: &self.arm,
            }),
        };
        let (c, g) = combined_loss_grad(&inputs, &self.cfg)?;
        Ok((c.total, g))
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Entries sampled from each parameter tensor.
    pub samples_per_tensor: usize,
    /// Entries sampled from each fusion filter tensor.
    pub fusion_samples_per_tensor: usize,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            samples_per_tensor: 2,
            fusion_samples_per_tensor: 8,
            floor: 1e-6,
            seed: 0,
            mode: Mode::Train,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub entries: Vec<GradEntry>,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }

    pub fn fusion_entries(&self) -> usize {
        self.entries.iter().filter(|e| is_fusion(&e.parameter)).count()
    }

    /// Largest relative error among the fusion filter entries.
    pub fn max_fusion_relative_error(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| is_fusion(&e.parameter))
            .map(|e| e.relative_error)
            .fold(0.0, f64::max)
    }
}

fn is_fusion(name: &str) -> bool {
    name.contains(".fusion.")
}

fn loss_at<O: Objective<f64> + ?Sized>(
    model: &mut Model<f64>,
    images: &Tensor<f64>,
    objective: &O,
    mode: Mode,
) -> Result<f64> {
    let pred = model.forward_train(images, mode)?;
    Ok(objective.value_and_grads(&pred)?.0)
}

fn nudge(model: &mut Model<f64>, name: &str, index: usize, delta: f64) {
    model.visit_mut("", &mut |n, e| {
        if let EntryMut::Param(p) = e {
            if n == name {
                p.value.data_mut()[index] += delta;
            }
        }
    });
}

/// Draws batch-norm scales from [0.5, 1.5] and shifts from [-0.5, 0.5].
/// With the initial zero shifts a channel whose input is identically zero
/// sits exactly on the following ReLU kink, where central differences and
/// the one-sided backward rule disagree.
pub fn perturb_batch_norm<T: Scalar>(model: &mut Model<T>, seed: u64) {
    let mut layers = Vec::new();
    model.visit("", &mut |name, e| {
        if let (Entry::Buffer(_), Some(prefix)) = (e, name.strip_suffix(".running_mean")) {
            layers.push(prefix.to_string());
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.visit_mut("", &mut |name, e| {
        if let EntryMut::Param(p) = e {
            let range = match name.rsplit_once('.') {
                Some((prefix, "weight")) if layers.iter().any(|l| l == prefix) => 0.5..1.5,
                Some((prefix, "bias")) if layers.iter().any(|l| l == prefix) => -0.5..0.5,
                _ => return,
            };
            for v in p.value.data_mut() {
                *v = T::lit(rng.gen_range(range.clone()));
            }
        }
    });
}

/// Compares backpropagated gradients of `objective` with central finite
/// differences on a seeded sample of parameter entries, always including
/// the fusion filters. In `Mode::Train` the batch-norm running statistics
/// are updated by every evaluation.
pub fn gradient_check<O: Objective<f64> + ?Sized>(
    model: &mut Model<f64>,
    images: &Tensor<f64>,
    objective: &O,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    model.zero_grad();
    let pred = model.forward_train(images, cfg.mode)?;
    let (loss, grads) = objective.value_and_grads(&pred)?;
    model.backward(&grads)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks: Vec<(String, usize, f64)> = Vec::new();
    model.visit("", &mut |name, e| {
        if let Entry::Param(p) = e {
            let k = if is_fusion(name) {
                cfg.fusion_samples_per_tensor
            } else {
                cfg.samples_per_tensor
            };
            let len = p.grad.len();
            for i in rand::seq::index::sample(&mut rng, len, k.min(len)) {
                picks.push((name.to_string(), i, p.grad.data()[i]));
            }
        }
    });

    let mut entries = Vec::with_capacity(picks.len());
    for (name, index, analytic) in picks {
        nudge(model, &name, index, cfg.step);
        let plus = loss_at(model, images, objective, cfg.mode)?;
        nudge(model, &name, index, -2.0 * cfg.step);
        let minus = loss_at(model, images, objective, cfg.mode)?;
        nudge(model, &name, index, cfg.step);
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let relative_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
        entries.push(GradEntry {
            parameter: name,
            index,
            analytic,
            numeric,
            relative_error,
        });
    }
    let max_relative_error = entries.iter().map(|e| e.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        loss,
        entries,
        max_relative_error,
    })
}

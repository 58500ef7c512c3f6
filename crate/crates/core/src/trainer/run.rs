use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::evaluate::evaluate_samples;
use super::optim::Sgd;
use super::{early_stop_check, lr_schedule_step, FinalWeights, TrainConfig, TrainState};
use crate::checkpoint;
use crate::data::{
    apply_augmentation, collate, load_samples, sample_rng, AugmentationConfig, DatasetManifest, Normalization, Sample,
};
use crate::error::{shape_err, Error, Result};
use crate::losses::{combined_loss_grad, LossConfig, LossInputs, MaskPair, OneHotTarget};
use crate::model::Model;
use crate::nn::{Mode, Module};
use crate::tensor::{Scalar, Tensor};
use crate::types::{SegmentationMap, ARM, OBJECT_CLASSES};

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LAST_CHECKPOINT: &str = "last.safetensors";

/// One row of the training log. Mask losses are absent for the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub loss_affordance: f64,
    pub loss_object: Option<f64>,
    pub loss_arm: Option<f64>,
    pub val_miou: Option<f64>,
    /// Rate used during this epoch.
    pub lr: f64,
    pub wall_time: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,loss_affordance,loss_object,loss_arm,val_miou,lr,wall_time";

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
        format!(
            "{},{:.8},{:.8},{},{},{},{:e},{:.3}",
            self.epoch,
            self.loss,
            self.loss_affordance,
            opt(self.loss_object),
            opt(self.loss_arm),
            opt(self.val_miou),
            self.lr,
            self.wall_time
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    TargetReached,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_miou: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
    pub stop_reason: StopReason,
}

/// Binary object (`graspable` or `contain`) and arm targets, `[B, 1, H, W]`.
pub fn mask_targets<T: Scalar>(masks: &[SegmentationMap]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = masks.first().ok_or_else(|| shape_err!("no masks given"))?;
    let (w, h) = (first.width(), first.height());
    if masks.iter().any(|m| (m.width(), m.height()) != (w, h)) {
        return Err(shape_err!("masks in a batch must share one size"));
    }
    let object = Tensor::from_fn([masks.len(), 1, h, w], |[n, _, y, x]| {
        if OBJECT_CLASSES.contains(&masks[n].get(x, y)) {
            T::one()
        } else {
            T::zero()
        }
    });
    let arm = Tensor::from_fn([masks.len(), 1, h, w], |[n, _, y, x]| {
        if masks[n].get(x, y) == ARM {
            T::one()
        } else {
            T::zero()
        }
    });
    Ok((object, arm))
}

/// Trains on the records of `train_manifest`, selecting on the
/// foreground mean IoU of `val_manifest`. Both are cropped at the model's
/// input size. With an output directory, checkpoints and a CSV log are
/// written there.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_manifest: &DatasetManifest,
    val_manifest: &DatasetManifest,
    cfg: &TrainConfig,
    augmentation: &AugmentationConfig,
    output_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_with_observer(
        model,
        train_manifest,
        val_manifest,
        cfg,
        augmentation,
        output_dir,
        &mut |_| {},
    )
}

/// [`train`] with a callback after every epoch.
pub fn train_with_observer<T: Scalar>(
    model: &mut Model<T>,
    train_manifest: &DatasetManifest,
    val_manifest: &DatasetManifest,
    cfg: &TrainConfig,
    augmentation: &AugmentationConfig,
    output_dir: Option<&Path>,
    observer: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    augmentation.validate()?;
    for (name, m) in [("training", train_manifest), ("validation", val_manifest)] {
        if m.is_empty() {
            return Err(Error::EmptyDataset(format!("{name} manifest has no records")));
        }
    }
    if cfg.max_epochs == 0 {
        return Ok(TrainOutcome {
            logs: Vec::new(),
            best_epoch: None,
            best_val_miou: None,
            best_checkpoint: None,
            last_checkpoint: None,
            stop_reason: StopReason::MaxEpochs,
        });
    }
    let size = model.config().input_size;
    let train_samples = load_samples(train_manifest, size)?;
    let val_samples = load_samples(val_manifest, size)?;
    train_on_samples(
        model,
        &train_samples,
        &val_samples,
        &train_manifest.normalization,
        cfg,
        augmentation,
        output_dir,
        observer,
    )
}

struct Sums {
    total: f64,
    affordance: f64,
    object: Option<f64>,
    arm: Option<f64>,
    items: usize,
}

/// Training loop over already cropped samples.
#[allow(clippy::too_many_arguments)]
pub fn train_on_samples<T: Scalar>(
    model: &mut Model<T>,
    train_samples: &[Sample],
    val_samples: &[Sample],
    norm: &Normalization,
    cfg: &TrainConfig,
    augmentation: &AugmentationConfig,
    output_dir: Option<&Path>,
    observer: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    augmentation.validate()?;
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::EmptyDataset("training and validation sets must be non-empty".into()));
    }
    let loss_cfg = LossConfig {
        weights: cfg.loss_weights,
        dice: cfg.dice,
        bce_reduction: cfg.bce_reduction,
    };
    let num_classes = model.config().num_classes;
    let ckpt_dir = output_dir.map(|d| d.join(CHECKPOINT_DIR));
    if let Some(dir) = &ckpt_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log_writer = match output_dir {
        Some(dir) => {
            let path = dir.join(LOG_FILE);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(w, "{}", EpochLog::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };

    let norm_json = serde_json::to_string(norm).expect("normalization serializes");
    let mut state = TrainState::new(cfg);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut logs = Vec::new();
    let mut best: Option<(usize, f64, Option<PathBuf>)> = None;
    let mut best_model: Option<Model<T>> = None;
    let mut last_checkpoint = None;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut sums = Sums {
            total: 0.0,
            affordance: 0.0,
            object: None,
            arm: None,
            items: 0,
        };
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let pairs = chunk
                .iter()
                .map(|&i| {
                    let s = &train_samples[i];
                    let draw = augmentation.draw(&mut sample_rng(augmentation.seed, epoch, i));
                    apply_augmentation(&s.image, &s.mask, draw)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = collate::<T>(pairs, norm)?;
            let pred = model.forward_train(&batch.images, Mode::Train)?;
            let target = OneHotTarget::from_maps(&batch.masks, num_classes)?;
            let (object_t, arm_t) = mask_targets::<T>(&batch.masks)?;
            let inputs = LossInputs {
                affordance: &pred.affordance,
                affordance_target: &target,
                object: pred.object.as_ref().map(|p| MaskPair {
                    pred: p,
                    target: &object_t,
                }),
                arm: pred.arm.as_ref().map(|p| MaskPair {
                    pred: p,
                    target: &arm_t,
                }),
            };
            let (c, grads) = combined_loss_grad(&inputs, &loss_cfg)?;
            let to = |v: T| v.to_f64().unwrap_or(f64::NAN);
            let finite = to(c.total).is_finite()
                && grads.affordance.all_finite()
                && grads.arm.as_ref().is_none_or(|g| g.all_finite())
                && grads.object.as_ref().is_none_or(|g| g.all_finite());
            if !finite {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!(
                        "total {}, affordance {}, object {:?}, arm {:?}",
                        to(c.total),
                        to(c.affordance),
                        c.object.map(to),
                        c.arm.map(to)
                    ),
                });
            }
            model.zero_grad();
            model.backward(&grads)?;
            opt.step(model, state.current_lr);

            let k = chunk.len() as f64;
            sums.items += chunk.len();
            sums.total += k * to(c.total);
            sums.affordance += k * to(c.affordance);
            if let Some(o) = c.object {
                *sums.object.get_or_insert(0.0) += k * to(o);
            }
            if let Some(a) = c.arm {
                *sums.arm.get_or_insert(0.0) += k * to(a);
            }
        }

        let report = evaluate_samples(&*model, val_samples, norm)?;
        let val_miou = report.foreground_miou();
        let n = sums.items as f64;
        let log = EpochLog {
            epoch,
            loss: sums.total / n,
            loss_affordance: sums.affordance / n,
            loss_object: sums.object.map(|v| v / n),
            loss_arm: sums.arm.map(|v| v / n),
            val_miou,
            lr: state.current_lr,
            wall_time: started.elapsed().as_secs_f64(),
        };

        let improved = matches!(val_miou, Some(v) if v > state.best_val_miou);
        state = lr_schedule_step(state, val_miou, cfg);
        if improved {
            let v = val_miou.expect("improvement implies a score");
            let path = match &ckpt_dir {
                Some(dir) => {
                    let p = dir.join(format!("best_epoch{epoch:03}_miou{v:.4}.safetensors"));
                    checkpoint::save_with_metadata(
                        model,
                        &p,
                        &[
                            ("epoch", epoch.to_string()),
                            ("val_miou", format!("{v}")),
                            (checkpoint::NORMALIZATION_KEY, norm_json.clone()),
                        ],
                    )?;
                    Some(p)
                }
                None => None,
            };
            best = Some((epoch, v, path));
            if cfg.final_weights == FinalWeights::Best {
                best_model = Some(model.clone());
            }
        }
        if let Some(dir) = &ckpt_dir {
            let p = dir.join(LAST_CHECKPOINT);
            checkpoint::save_with_metadata(
                model,
                &p,
                &[("epoch", epoch.to_string()), (checkpoint::NORMALIZATION_KEY, norm_json.clone())],
            )?;
            last_checkpoint = Some(p);
        }
        if let Some((w, path)) = &mut log_writer {
            writeln!(w, "{}", log.to_csv_row())
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&*path, e))?;
        }
        observer(&log);
        logs.push(log);

        if matches!((cfg.target_val_miou, val_miou), (Some(t), Some(v)) if v >= t) {
            stop_reason = StopReason::TargetReached;
            break;
        }
        if early_stop_check(&state, cfg) {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    if let Some(m) = best_model {
        *model = m;
    }
    Ok(TrainOutcome {
        logs,
        best_epoch: best.as_ref().map(|b| b.0),
        best_val_miou: best.as_ref().map(|b| b.1),
        best_checkpoint: best.and_then(|b| b.2),
        last_checkpoint,
        stop_reason,
    })
}

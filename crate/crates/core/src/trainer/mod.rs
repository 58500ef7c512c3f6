//! Mini-batch training with momentum, plateau learning-rate halving keyed
//! on validation mean IoU, early stopping and checkpointing.

mod evaluate;
mod gradcheck;
mod optim;
mod run;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{DiceConfig, LossWeights, Reduction};

pub use evaluate::{evaluate, evaluate_samples, Segmenter};
pub use gradcheck::{gradient_check, perturb_batch_norm, CombinedObjective, GradCheckConfig, GradCheckReport, Objective};
pub use optim::Sgd;
pub use run::{
    mask_targets, train, train_on_samples, train_with_observer, EpochLog, StopReason, TrainOutcome, CHECKPOINT_DIR,
    LAST_CHECKPOINT, LOG_FILE,
};

/// Weights kept in the model when training ends.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalWeights {
    #[default]
    Best,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub loss_weights: LossWeights,
    pub dice: DiceConfig,
    pub bce_reduction: Reduction,
    pub seed: u64,
    /// Stop once validation mean IoU reaches this value.
    pub target_val_miou: Option<f64>,
    pub final_weights: FinalWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            lr_initial: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
            lr_factor: 0.5,
            lr_patience: 3,
            early_stop_patience: 10,
            max_epochs: 100,
            loss_weights: LossWeights::default(),
            dice: DiceConfig::default(),
            bce_reduction: Reduction::default(),
            seed: 0,
            target_val_miou: None,
            final_weights: FinalWeights::Best,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_initial", self.lr_initial),
            ("lr_factor", self.lr_factor),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lr_factor >= 1.0 {
            return Err(Error::Config(format!("lr_factor must be below 1, got {}", self.lr_factor)));
        }
        for (name, v) in [("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("lr_patience", self.lr_patience),
            ("early_stop_patience", self.early_stop_patience),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        self.loss_weights.validate()?;
        self.dice.validate()
    }
}

/// Plateau bookkeeping shared by the learning-rate schedule and early
/// stopping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub best_val_miou: f64,
    pub epochs_since_improvement: usize,
    pub epochs_since_lr_drop: usize,
    pub current_lr: f64,
    /// Number of learning-rate reductions so far.
    pub lr_drops: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            best_val_miou: f64::NEG_INFINITY,
            epochs_since_improvement: 0,
            epochs_since_lr_drop: 0,
            current_lr: cfg.lr_initial,
            lr_drops: 0,
        }
    }
}

/// Records one validation score. A strict improvement resets both
/// counters; after `lr_patience` epochs without one the rate is scaled by
/// `lr_factor`. An undefined score counts as no improvement.
pub fn lr_schedule_step(state: TrainState, val_miou: Option<f64>, cfg: &TrainConfig) -> TrainState {
    let mut s = state;
    match val_miou {
        Some(v) if v > s.best_val_miou => {
            s.best_val_miou = v;
            s.epochs_since_improvement = 0;
            s.epochs_since_lr_drop = 0;
        }
        _ => {
            s.epochs_since_improvement += 1;
            s.epochs_since_lr_drop += 1;
            if s.epochs_since_lr_drop >= cfg.lr_patience {
                s.current_lr *= cfg.lr_factor;
                s.epochs_since_lr_drop = 0;
                s.lr_drops += 1;
            }
        }
    }
    s
}

pub fn early_stop_check(state: &TrainState, cfg: &TrainConfig) -> bool {
    state.epochs_since_improvement >= cfg.early_stop_patience
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(seq: &[f64]) -> TrainState {
        let cfg = TrainConfig::default();
        seq.iter()
            .fold(TrainState::new(&cfg), |s, &v| lr_schedule_step(s, Some(v), &cfg))
    }

    #[test]
    fn improving_sequence_keeps_rate() {
        assert_eq!(run(&[0.5, 0.6, 0.7]).current_lr, 0.001);
    }

    #[test]
    fn three_flat_epochs_halve_once() {
        let cfg = TrainConfig::default();
        let mut s = run(&[0.7]);
        for expected in [0.001, 0.001, 0.0005] {
            s = lr_schedule_step(s, Some(0.69), &cfg);
            assert_eq!(s.current_lr, expected);
        }
        assert_eq!(s.lr_drops, 1);
        assert_eq!(run(&[0.7, 0.69, 0.69, 0.69, 0.7, 0.7, 0.7]).current_lr, 0.00025);
        let equal = run(&[0.7, 0.7, 0.7, 0.7]);
        assert_eq!(equal.current_lr, 0.0005);
    }

    #[test]
    fn early_stopping() {
        let cfg = TrainConfig::default();
        let fresh = TrainState::new(&cfg);
        assert!(!early_stop_check(&fresh, &cfg));
        let mut s = lr_schedule_step(fresh, Some(0.5), &cfg);
        for i in 0..10 {
            assert!(!early_stop_check(&s, &cfg), "{i}");
            s = lr_schedule_step(s, Some(0.4), &cfg);
        }
        assert!(early_stop_check(&s, &cfg));

        let mut s = lr_schedule_step(fresh, Some(0.5), &cfg);
        for _ in 0..8 {
            s = lr_schedule_step(s, Some(0.4), &cfg);
        }
        s = lr_schedule_step(s, Some(0.51), &cfg);
        assert_eq!(s.epochs_since_improvement, 0);
        assert!(!early_stop_check(&s, &cfg));
    }

    #[test]
    fn undefined_score_is_not_an_improvement() {
        let cfg = TrainConfig::default();
        let s = lr_schedule_step(TrainState::new(&cfg), None, &cfg);
        assert_eq!(s.epochs_since_improvement, 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { lr_initial: 0.0, ..TrainConfig::default() },
            TrainConfig { lr_factor: 1.0, ..TrainConfig::default() },
            TrainConfig { lr_patience: 0, ..TrainConfig::default() },
            TrainConfig { momentum: -0.1, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}

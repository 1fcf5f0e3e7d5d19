//! Correlation-loss training with Adam, plateau decay and early stopping,
//! plus the four cross-cohort strategies.

mod checkpoint;
mod optim;
mod strategy;
mod trainer;

pub use checkpoint::{param_hash, Checkpoint, Provenance};
pub use optim::{Adam, EarlyStop, Plateau, StopDecision};
pub use strategy::{
    run_strategy, Cohort, FoldOutcome, StrategyKind, StrategyOutcome, StrategySpec,
};
pub use trainer::{scan_loss, train_model, write_epoch_log, EpochRecord, ScanLoss, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::dataset::Target;
use crate::error::{Error, Result};

/// Which series the model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Rv,
    Hr,
    /// Both, as two output channels (RV first).
    Joint,
}

impl Task {
    pub fn targets(self) -> &'static [Target] {
        match self {
            Task::Rv => &[Target::Rv],
            Task::Hr => &[Target::Hr],
            Task::Joint => &[Target::Rv, Target::Hr],
        }
    }

    pub fn n_outputs(self) -> usize {
        self.targets().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: Task,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_finetune: f64,
    pub lr_decay: f64,
    pub lr_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// A loss must drop by more than this to count as an improvement.
    pub min_delta: f64,
    pub val_frac: f64,
    pub n_folds: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Rv,
            batch_size: 16,
            lr_init: 1e-4,
            lr_finetune: 5e-5,
            lr_decay: 0.5,
            lr_patience: 2,
            early_stop_patience: 5,
            max_epochs: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            min_delta: 1e-6,
            val_frac: 0.15,
            n_folds: 5,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad =
            |field: &str, msg: String| Error::invalid(format!("train field '{field}': {msg}"));
        for (field, v) in [
            ("lr_init", self.lr_init),
            ("lr_finetune", self.lr_finetune),
            ("lr_decay", self.lr_decay),
            ("epsilon", self.epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(field, format!("must be > 0, got {v}")));
            }
        }
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("lr_patience", self.lr_patience),
            ("early_stop_patience", self.early_stop_patience),
        ] {
            if v == 0 {
                return Err(bad(field, "must be positive".into()));
            }
        }
        for (field, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("val_frac", self.val_frac),
        ] {
            if !(0.0 < v && v < 1.0) {
                return Err(bad(field, format!("must be in (0, 1), got {v}")));
            }
        }
        if self.n_folds < 2 {
            return Err(bad(
                "n_folds",
                format!("must be >= 2, got {}", self.n_folds),
            ));
        }
        if self.min_delta.is_nan() || self.min_delta < 0.0 {
            return Err(bad(
                "min_delta",
                format!("must be >= 0, got {}", self.min_delta),
            ));
        }
        Ok(())
    }
}

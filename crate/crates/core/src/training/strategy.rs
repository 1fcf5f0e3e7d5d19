use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Provenance};
use super::trainer::{train_model, EpochRecord};
use super::TrainConfig;
use crate::dataset::{make_age_balanced_folds, select_validation, FoldPlan, Scan};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_params, EvalReport, ScanResult};
use crate::models::{ModelConfig, ModelParams};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Train on the source cohort only; test on every target fold.
    PretrainOnly,
    /// k-fold train/test on the target cohort.
    Scratch,
    /// Per fold, train on all source scans plus the target training folds.
    JointScratch,
    /// Pretrain on the source once, then fine-tune per target fold.
    Finetune,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::PretrainOnly => "pretrain_only",
            StrategyKind::Scratch => "scratch",
            StrategyKind::JointScratch => "joint_scratch",
            StrategyKind::Finetune => "finetune",
        }
    }

    pub fn needs_source(self) -> bool {
        !matches!(self, StrategyKind::Scratch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    #[serde(default)]
    pub source_dataset: Option<String>,
    pub target_dataset: String,
}

impl StrategySpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind.needs_source() && self.source_dataset.is_none() {
            return Err(Error::invalid(format!(
                "strategy '{}' requires a source dataset",
                self.kind.name()
            )));
        }
        Ok(())
    }
}

/// A named set of prepared scans that counts how often each scan is handed
/// out for training and for evaluation.
#[derive(Debug)]
pub struct Cohort {
    pub name: String,
    pub settings_hash: String,
    scans: Vec<Scan>,
    train_reads: Vec<AtomicUsize>,
    eval_reads: Vec<AtomicUsize>,
}

impl Cohort {
    pub fn new(
        name: impl Into<String>,
        scans: Vec<Scan>,
        settings_hash: impl Into<String>,
    ) -> Result<Self> {
        let name = name.into();
        let first = scans
            .first()
            .ok_or_else(|| Error::invalid(format!("cohort '{name}' has no scans")))?;
        if let Some(s) = scans.iter().find(|s| s.n_roi() != first.n_roi()) {
            return Err(Error::invalid(format!(
                "cohort '{name}': scan '{}' has {} ROIs, '{}' has {}",
                s.scan_id,
                s.n_roi(),
                first.scan_id,
                first.n_roi()
            )));
        }
        let counters = || scans.iter().map(|_| AtomicUsize::new(0)).collect();
        Ok(Self {
            name,
            settings_hash: settings_hash.into(),
            train_reads: counters(),
            eval_reads: counters(),
            scans,
        })
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    pub fn n_roi(&self) -> usize {
        self.scans[0].n_roi()
    }

    /// `(scan_id, subject_id, age)` without counting an access.
    pub fn meta(&self, i: usize) -> (&str, &str, f64) {
        let s = &self.scans[i];
        (&s.scan_id, &s.subject_id, s.age)
    }

    pub fn for_training(&self, i: usize) -> &Scan {
        self.train_reads[i].fetch_add(1, Ordering::Relaxed);
        &self.scans[i]
    }

    pub fn for_eval(&self, i: usize) -> &Scan {
        self.eval_reads[i].fetch_add(1, Ordering::Relaxed);
        &self.scans[i]
    }

    pub fn training_reads(&self) -> Vec<usize> {
        self.train_reads
            .iter()
            .map(|c| c.load(Ordering::Relaxed))
            .collect()
    }

    pub fn eval_reads(&self) -> Vec<usize> {
        self.eval_reads
            .iter()
            .map(|c| c.load(Ordering::Relaxed))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub pretrain: Option<(Checkpoint, Vec<EpochRecord>)>,
    /// Empty for `pretrain_only`, whose single model is `pretrain`.
    pub folds: Vec<FoldOutcome>,
    pub plan: FoldPlan,
    pub report: EvalReport,
}

struct Job<'a> {
    strategy: StrategyKind,
    fold: Option<usize>,
    model: &'a ModelConfig,
    cfg: &'a TrainConfig,
    settings_hash: &'a str,
}

impl Job<'_> {
    /// Carves a subject-level validation split from `train` and trains.
    fn run<T: Real>(
        &self,
        train: Vec<(String, &Scan)>,
        init: ModelParams<T>,
        lr: f64,
        seed: u64,
    ) -> Result<(Checkpoint, Vec<EpochRecord>, usize, usize)> {
        let keys: Vec<&str> = train.iter().map(|(k, _)| k.as_str()).collect();
        let (tr, va) = select_validation(&keys, self.cfg.val_frac, seed)?;
        let tr: Vec<&Scan> = tr.iter().map(|&i| train[i].1).collect();
        let va: Vec<&Scan> = va.iter().map(|&i| train[i].1).collect();
        let cfg = TrainConfig {
            seed,
            ..self.cfg.clone()
        };
        let label = match self.fold {
            Some(f) => format!("{} fold {f}", self.strategy.name()),
            None => format!("{} pretraining", self.strategy.name()),
        };
        log::info!(
            "{label}: {} training scans, {} validation scans",
            tr.len(),
            va.len()
        );
        let out =
            train_model(self.model, init, &tr, &va, &cfg, lr).map_err(|e| e.in_stage(label))?;
        let provenance = Provenance {
            strategy: self.strategy.name().to_string(),
            fold: self.fold,
            task: cfg.task,
            seed,
            epochs_run: out.epochs_run,
            best_epoch: out.best_epoch,
            initial_val_loss: out.initial_val_loss,
            final_val_loss: out.best_val_loss,
            initial_lr: out.initial_lr,
            init_param_hash: out.init_param_hash,
            training_data_hash: out.data_hash,
            prep_settings_hash: self.settings_hash.to_string(),
            created_unix: None,
        };
        let ckpt = Checkpoint {
            model: self.model.clone(),
            params: out.params.cast(),
            optimizer: Some(out.optimizer.cast()),
            provenance,
        };
        Ok((ckpt, out.log, tr.len(), va.len()))
    }
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add(1 + fold as u64)
}

/// Runs one strategy end to end: optional source pretraining, per-fold
/// training on the target cohort, and evaluation of each fold's held-out
/// scans. The model's input and output sizes are taken from the data and
/// the task.
pub fn run_strategy<T: Real>(
    spec: &StrategySpec,
    model: &ModelConfig,
    source: Option<&Cohort>,
    target: &Cohort,
    cfg: &TrainConfig,
) -> Result<StrategyOutcome> {
    spec.validate()?;
    cfg.validate()?;
    let source = match (spec.kind.needs_source(), source) {
        (true, None) => {
            return Err(Error::invalid(format!(
                "strategy '{}' requires source scans",
                spec.kind.name()
            )))
        }
        (true, Some(s)) => {
            if s.n_roi() != target.n_roi() {
                return Err(Error::invalid(format!(
                    "source has {} ROIs, target has {}",
                    s.n_roi(),
                    target.n_roi()
                )));
            }
            if s.settings_hash != target.settings_hash {
                return Err(Error::HashMismatch {
                    expected: target.settings_hash.clone(),
                    found: s.settings_hash.clone(),
                });
            }
            Some(s)
        }
        (false, _) => None,
    };
    let mut model = model.clone();
    model.set_io(target.n_roi(), cfg.task.n_outputs());
    model.validate()?;

    let subjects: Vec<(String, f64)> = (0..target.len())
        .map(|i| {
            let (_, s, a) = target.meta(i);
            (s.to_string(), a)
        })
        .collect();
    let plan = make_age_balanced_folds(&subjects, cfg.n_folds, cfg.seed)?;
    let fold_of: Vec<usize> = subjects.iter().map(|(s, _)| plan.assignment[s]).collect();
    let key = |c: &Cohort, i: usize| format!("{}:{}", c.name, c.meta(i).1);

    let job = |fold| Job {
        strategy: spec.kind,
        fold,
        model: &model,
        cfg,
        settings_hash: &target.settings_hash,
    };

    let pretrain = match (spec.kind, source) {
        (StrategyKind::PretrainOnly | StrategyKind::Finetune, Some(src)) => {
            let train = (0..src.len())
                .map(|i| (key(src, i), src.for_training(i)))
                .collect();
            let init = ModelParams::<T>::init(&model, cfg.seed)?;
            let (ckpt, log, _, _) = job(None).run(train, init, cfg.lr_init, cfg.seed)?;
            Some((ckpt, log))
        }
        _ => None,
    };

    let mut folds = Vec::new();
    let mut results: Vec<ScanResult> = Vec::new();
    for f in 0..cfg.n_folds {
        let test_idx: Vec<usize> = (0..target.len()).filter(|&i| fold_of[i] == f).collect();
        let train_idx: Vec<usize> = (0..target.len()).filter(|&i| fold_of[i] != f).collect();
        let seed = fold_seed(cfg.seed, f);
        let ckpt = if spec.kind == StrategyKind::PretrainOnly {
            pretrain.as_ref().expect("pretrained above").0.clone()
        } else {
            let mut train: Vec<(String, &Scan)> = Vec::new();
            if spec.kind == StrategyKind::JointScratch {
                let src = source.expect("checked above");
                train.extend((0..src.len()).map(|i| (key(src, i), src.for_training(i))));
            }
            train.extend(
                train_idx
                    .iter()
                    .map(|&i| (key(target, i), target.for_training(i))),
            );
            let (init, lr) = match &pretrain {
                Some((p, _)) => (p.params.cast::<T>(), cfg.lr_finetune),
                None => (ModelParams::<T>::init(&model, seed)?, cfg.lr_init),
            };
            let (ckpt, log, n_train, n_val) = job(Some(f)).run(train, init, lr, seed)?;
            folds.push(FoldOutcome {
                fold: f,
                checkpoint: ckpt.clone(),
                log,
                n_train,
                n_val,
                n_test: test_idx.len(),
            });
            ckpt
        };
        let test: Vec<&Scan> = test_idx.iter().map(|&i| target.for_eval(i)).collect();
        let params: ModelParams<T> = ckpt.params.cast();
        results.extend(
            evaluate_params(&model, &params, &test, cfg.task, f)
                .map_err(|e| e.in_stage(format!("fold {f} evaluation")))?,
        );
    }
    let report = EvalReport::build(
        spec.kind.name(),
        model.name(),
        &target.settings_hash,
        results,
    )?;
    Ok(StrategyOutcome {
        pretrain,
        folds,
        plan,
        report,
    })
}

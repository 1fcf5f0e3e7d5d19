use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::param_hash;
use super::optim::{Adam, EarlyStop, Plateau, StopDecision};
use super::{Task, TrainConfig};
use crate::autodiff::Tape;
use crate::dataset::Scan;
use crate::error::{Error, Result};
use crate::models::{forward, ModelConfig, ModelParams};
use crate::scalar::Real;

const DROPOUT_STREAM_SALT: u64 = 0xd50f_7a11_0c8e_2b19;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Weights from the best validation epoch (the initial weights when no
    /// epoch ran).
    pub params: ModelParams<T>,
    pub optimizer: Adam<T>,
    pub log: Vec<EpochRecord>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub initial_val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub initial_lr: f64,
    pub init_param_hash: String,
    pub data_hash: String,
}

/// Correlation loss of one scan plus, optionally, its parameter gradients.
pub struct ScanLoss<T> {
    pub loss: f64,
    pub grads: Option<BTreeMap<String, Vec<T>>>,
    pub warnings: usize,
}

/// Mean of `1 - r` over the task's output channels for one scan. Targets are
/// cropped to the model's output span.
pub fn scan_loss<T: Real>(
    model: &ModelConfig,
    params: &ModelParams<T>,
    scan: &Scan,
    task: Task,
    rng: Option<&mut dyn RngCore>,
    with_grad: bool,
) -> Result<ScanLoss<T>> {
    let (offset, n) = model.output_span(scan.len())?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let roi = scan.roi.iter().map(|&v| T::lit(v)).collect();
    let x = tape.constant(vec![scan.len(), scan.n_roi()], roi)?;
    let out = forward(&mut tape, model, &p, x, rng)?;
    let targets = task.targets();
    let mut total = None;
    for (j, &target) in targets.iter().enumerate() {
        let y: Vec<T> = scan.target(target)[offset..offset + n]
            .iter()
            .map(|&v| T::lit(v))
            .collect();
        let col = if targets.len() == 1 {
            out
        } else {
            tape.narrow(out, 1, j, 1)?
        };
        let l = tape
            .pearson_loss(col, &y)
            .map_err(|e| e.in_stage(format!("{} loss", target.name())))?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.expect("task has at least one target");
    let loss_var = tape.scale(total, T::lit(1.0 / targets.len() as f64));
    let loss = tape.value(loss_var)[0].as_f64();
    let warnings = tape.warnings().len();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss of scan '{}'", scan.scan_id)));
    }
    let grads = if with_grad {
        let vars: Vec<(String, _)> = p.iter().map(|(k, v)| (k.to_string(), v)).collect();
        let g = tape.backward(loss_var)?;
        Some(
            vars.into_iter()
                .map(|(k, v)| Ok((k, g.wrt(v)?.to_vec())))
                .collect::<Result<BTreeMap<_, _>>>()?,
        )
    } else {
        None
    };
    Ok(ScanLoss {
        loss,
        grads,
        warnings,
    })
}

fn mean_loss<T: Real>(
    model: &ModelConfig,
    params: &ModelParams<T>,
    scans: &[&Scan],
    task: Task,
) -> Result<f64> {
    let losses = scans
        .par_iter()
        .map(|s| scan_loss(model, params, s, task, None, false).map(|l| l.loss))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub(crate) fn data_hash(train: &[&Scan], val: &[&Scan]) -> String {
    let mut h = Sha256::new();
    for s in train {
        h.update(s.content_hash());
    }
    h.update(b"|");
    for s in val {
        h.update(s.content_hash());
    }
    hex::encode(h.finalize())
}

/// Runs epochs of shuffled scan mini-batches from `init`, starting at `lr`.
/// Gradients are averaged over each batch; validation loss drives plateau
/// decay and early stopping, and the best-validation weights are returned.
pub fn train_model<T: Real>(
    model: &ModelConfig,
    init: ModelParams<T>,
    train: &[&Scan],
    val: &[&Scan],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(format!(
            "training needs non-empty train and validation sets, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let init_param_hash = param_hash(&init);
    let data_hash = data_hash(train, val);
    let mut optimizer = Adam::new(cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut outcome = TrainOutcome {
        params: init.clone(),
        optimizer: optimizer.clone(),
        log: Vec::new(),
        epochs_run: 0,
        best_epoch: None,
        initial_val_loss: None,
        best_val_loss: None,
        initial_lr: lr,
        init_param_hash,
        data_hash,
    };
    if cfg.max_epochs == 0 {
        return Ok(outcome);
    }
    outcome.initial_val_loss =
        Some(mean_loss(model, &init, val, cfg.task).map_err(|e| e.in_stage("initial validation"))?);

    let mut params = init;
    let mut plateau = Plateau::new(lr, cfg.lr_decay, cfg.lr_patience, cfg.min_delta);
    let mut stopper = EarlyStop::new(cfg.early_stop_patience, cfg.min_delta);
    let mut lr = lr;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut warnings = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let at = |e: Error| e.in_stage(format!("epoch {epoch}, batch {}", b + 1));
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM_SALT);
                    rng.set_stream(((epoch as u64) << 32) | (b * cfg.batch_size + k) as u64);
                    scan_loss(model, &params, train[i], cfg.task, Some(&mut rng), true)
                })
                .collect::<Vec<_>>();
            let scale = T::lit(1.0 / batch.len() as f64);
            let mut grads: BTreeMap<String, Vec<T>> = BTreeMap::new();
            for r in results {
                let sl = r.map_err(at)?;
                loss_sum += sl.loss;
                warnings += sl.warnings;
                for (name, g) in sl.grads.expect("requested gradients") {
                    let acc = grads
                        .entry(name)
                        .or_insert_with(|| vec![T::zero(); g.len()]);
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v * scale;
                    }
                }
            }
            optimizer.step(&mut params, &grads, lr).map_err(at)?;
        }
        if warnings > 0 {
            log::warn!(
                "epoch {epoch}: {warnings} constant-prediction warnings from the correlation loss"
            );
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = mean_loss(model, &params, val, cfg.task)
            .map_err(|e| e.in_stage(format!("epoch {epoch}, validation")))?;
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr:e}");
        outcome.log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        outcome.epochs_run = epoch;
        let decision = stopper.update(epoch, val_loss);
        if stopper.best_epoch() == Some(epoch) {
            outcome.params = params.clone();
            outcome.optimizer = optimizer.clone();
            outcome.best_epoch = Some(epoch);
            outcome.best_val_loss = Some(val_loss);
        }
        if decision == StopDecision::Stop {
            break;
        }
        lr = plateau.step(val_loss);
    }
    Ok(outcome)
}

/// `epoch,train_loss,val_loss,lr`, one row per epoch.
pub fn write_epoch_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut text = String::from("epoch,train_loss,val_loss,lr\n");
    for r in log {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.lr
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

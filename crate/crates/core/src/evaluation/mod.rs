//! Per-scan correlation scoring and median / age-group summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Scan, Target};
use crate::error::{Error, Result};
use crate::models::{predict, ModelConfig, ModelParams};
use crate::scalar::Real;
use crate::training::{Checkpoint, Task};

/// Pearson correlation in double precision. Returns NaN when either series
/// has standard deviation at or below 1e-12.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "pearson_r",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let n = a.len();
    if n < 3 {
        return Err(Error::invalid(format!(
            "correlation needs at least 3 points, got {n}"
        )));
    }
    let nf = n as f64;
    let ma = a.iter().sum::<f64>() / nf;
    let mb = b.iter().sum::<f64>() / nf;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if (saa / nf).sqrt() <= 1e-12 || (sbb / nf).sqrt() <= 1e-12 {
        return Ok(f64::NAN);
    }
    let denom = match (saa * sbb).sqrt() {
        d if d.is_finite() && d > 0.0 => d,
        _ => saa.sqrt() * sbb.sqrt(),
    };
    Ok((sab / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub scan_id: String,
    pub subject_id: String,
    pub age: f64,
    pub fold: usize,
    pub task: Target,
    /// `None` when either series was constant.
    pub r: Option<f64>,
}

/// Model output aligned with the measured series it is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPrediction {
    pub scan_id: String,
    /// Input index of the first prediction.
    pub offset: usize,
    pub dt: f64,
    pub targets: Vec<Target>,
    pub measured: Vec<Vec<f64>>,
    pub predicted: Vec<Vec<f64>>,
}

/// Dropout-free forward pass; seq2one outputs align with input indices
/// `W/2 .. W/2 + T - W + 1`.
pub fn predict_scan<T: Real>(
    model: &ModelConfig,
    params: &ModelParams<T>,
    scan: &Scan,
    task: Task,
) -> Result<ScanPrediction> {
    let (offset, n) = model.output_span(scan.len())?;
    let roi: Vec<T> = scan.roi.iter().map(|&v| T::lit(v)).collect();
    let out = predict(model, params, &roi, scan.len())
        .map_err(|e| e.in_stage(format!("scan '{}'", scan.scan_id)))?;
    let k = model.n_outputs();
    let targets = task.targets().to_vec();
    if targets.len() != k {
        return Err(Error::invalid(format!(
            "model has {k} outputs but task {task:?} needs {}",
            targets.len()
        )));
    }
    let predicted = (0..k)
        .map(|j| (0..n).map(|i| out[i * k + j].as_f64()).collect())
        .collect();
    let measured = targets
        .iter()
        .map(|&t| scan.target(t)[offset..offset + n].to_vec())
        .collect();
    Ok(ScanPrediction {
        scan_id: scan.scan_id.clone(),
        offset,
        dt: scan.dt,
        targets,
        measured,
        predicted,
    })
}

fn score(scan: &Scan, pred: &ScanPrediction, fold: usize) -> Result<Vec<ScanResult>> {
    pred.targets
        .iter()
        .zip(pred.measured.iter().zip(&pred.predicted))
        .map(|(&task, (m, p))| {
            let r = pearson_r(m, p)?;
            if r.is_nan() {
                log::warn!(
                    "scan '{}': degenerate {} series, excluded from medians",
                    scan.scan_id,
                    task.name()
                );
            }
            Ok(ScanResult {
                scan_id: scan.scan_id.clone(),
                subject_id: scan.subject_id.clone(),
                age: scan.age,
                fold,
                task,
                r: (!r.is_nan()).then_some(r),
            })
        })
        .collect()
}

/// One result per scan per task target, in scan order.
pub fn evaluate_params<T: Real>(
    model: &ModelConfig,
    params: &ModelParams<T>,
    scans: &[&Scan],
    task: Task,
    fold: usize,
) -> Result<Vec<ScanResult>> {
    let per_scan = scans
        .par_iter()
        .map(|s| score(s, &predict_scan(model, params, s, task)?, fold))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_scan.into_iter().flatten().collect())
}

/// Scores a checkpoint after checking that the scans were prepared with the
/// settings it was trained on.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    scans: &[&Scan],
    data_settings_hash: &str,
    fold: usize,
) -> Result<Vec<ScanResult>> {
    if ckpt.provenance.prep_settings_hash != data_settings_hash {
        return Err(Error::HashMismatch {
            expected: ckpt.provenance.prep_settings_hash.clone(),
            found: data_settings_hash.to_string(),
        });
    }
    evaluate_params(&ckpt.model, &ckpt.params, scans, ckpt.provenance.task, fold)
}

/// Median; an even count averages the two central values.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("median of an empty set"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("median input contains NaN"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianSummary {
    pub pooled: f64,
    pub per_fold: BTreeMap<usize, f64>,
    pub n_scored: usize,
    /// Results with an undefined correlation, left out of every median.
    pub n_excluded: usize,
}

/// Pooled and per-fold medians of the defined correlations in `results`.
pub fn median_summary(results: &[ScanResult]) -> Result<MedianSummary> {
    let scored: Vec<&ScanResult> = results.iter().filter(|r| r.r.is_some()).collect();
    let values: Vec<f64> = scored.iter().filter_map(|r| r.r).collect();
    let pooled = median(&values).map_err(|e| e.in_stage("median summary"))?;
    let mut by_fold: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &scored {
        by_fold.entry(r.fold).or_default().extend(r.r);
    }
    let per_fold = by_fold
        .into_iter()
        .map(|(f, v)| Ok((f, median(&v)?)))
        .collect::<Result<_>>()?;
    Ok(MedianSummary {
        pooled,
        per_fold,
        n_scored: values.len(),
        n_excluded: results.len() - values.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeGroup {
    pub index: usize,
    pub age_min: f64,
    pub age_max: f64,
    pub n_subjects: usize,
    pub n_scans: usize,
    pub median_r: Option<f64>,
}

/// Splits subjects, sorted by (age, id), into `n_groups` equal-count groups
/// (earlier groups take the remainder) and reports each group's median r.
pub fn age_group_summary(results: &[ScanResult], n_groups: usize) -> Result<Vec<AgeGroup>> {
    if n_groups < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 age groups, got {n_groups}"
        )));
    }
    let mut ages: BTreeMap<&str, f64> = BTreeMap::new();
    for r in results {
        ages.entry(r.subject_id.as_str()).or_insert(r.age);
    }
    let n = ages.len();
    if n < n_groups {
        return Err(Error::invalid(format!(
            "{n} subjects cannot form {n_groups} age groups"
        )));
    }
    let mut subjects: Vec<(&str, f64)> = ages.into_iter().collect();
    subjects.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));

    let (base, extra) = (n / n_groups, n % n_groups);
    let mut start = 0;
    let mut groups = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let size = base + usize::from(g < extra);
        let members = &subjects[start..start + size];
        start += size;
        let ids: BTreeSet<&str> = members.iter().map(|m| m.0).collect();
        let in_group: Vec<&ScanResult> = results
            .iter()
            .filter(|r| ids.contains(r.subject_id.as_str()))
            .collect();
        let values: Vec<f64> = in_group.iter().filter_map(|r| r.r).collect();
        groups.push(AgeGroup {
            index: g,
            age_min: members[0].1,
            age_max: members[size - 1].1,
            n_subjects: size,
            n_scans: in_group.len(),
            median_r: if values.is_empty() {
                None
            } else {
                Some(median(&values)?)
            },
        });
    }
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: Target,
    pub medians: MedianSummary,
    pub age_groups: Vec<AgeGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub model: String,
    pub prep_settings_hash: String,
    pub tasks: Vec<TaskSummary>,
    pub scans: Vec<ScanResult>,
}

impl EvalReport {
    /// Summarizes every task present in `results`; age groups are left empty
    /// when there are fewer than three subjects.
    pub fn build(
        strategy: &str,
        model: &str,
        prep_settings_hash: &str,
        results: Vec<ScanResult>,
    ) -> Result<Self> {
        let tasks: BTreeSet<Target> = results.iter().map(|r| r.task).collect();
        let tasks = tasks
            .into_iter()
            .map(|task| {
                let subset: Vec<ScanResult> =
                    results.iter().filter(|r| r.task == task).cloned().collect();
                let medians = median_summary(&subset).map_err(|e| e.in_stage(task.name()))?;
                let age_groups = age_group_summary(&subset, 3).unwrap_or_default();
                Ok(TaskSummary {
                    task,
                    medians,
                    age_groups,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            strategy: strategy.to_string(),
            model: model.to_string(),
            prep_settings_hash: prep_settings_hash.to_string(),
            tasks,
            scans: results,
        })
    }

    pub fn task(&self, task: Target) -> Option<&TaskSummary> {
        self.tasks.iter().find(|t| t.task == task)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// `scan_id,subject_id,age,fold,task,r`; undefined r is written as `nan`.
    pub fn write_scan_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("scan_id,subject_id,age,fold,task,r\n");
        for s in &self.scans {
            let r = s.r.map_or_else(|| "nan".to_string(), |r| r.to_string());
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.scan_id,
                s.subject_id,
                s.age,
                s.fold,
                s.task.name(),
                r
            ));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `t,measured,predicted` for output channel `channel` of a prediction.
pub fn write_prediction_csv(path: &Path, pred: &ScanPrediction, channel: usize) -> Result<()> {
    let mut text = String::from("t,measured,predicted\n");
    for (i, (m, p)) in pred.measured[channel]
        .iter()
        .zip(&pred.predicted[channel])
        .enumerate()
    {
        let t = (pred.offset + i) as f64 * pred.dt;
        text.push_str(&format!("{t:.6},{m},{p}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

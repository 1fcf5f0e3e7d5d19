use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subject-level assignment to `k` cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignment.get(subject).copied()
    }

    pub fn subjects_in(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }
}

/// Sorts subjects by age (ties in seeded random order) and deals them
/// serpentine-wise, `0..k` then `k-1..0`, so every fold draws from each
/// age stratum and fold sizes differ by at most one.
///
/// A subject listed more than once keeps its first age.
pub fn make_age_balanced_folds(
    subjects: &[(String, f64)],
    k: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    let mut ages: BTreeMap<&str, f64> = BTreeMap::new();
    for (s, age) in subjects {
        if !age.is_finite() {
            return Err(Error::invalid(format!(
                "subject '{s}' has a non-finite age"
            )));
        }
        ages.entry(s.as_str()).or_insert(*age);
    }
    if ages.len() < k {
        return Err(Error::invalid(format!(
            "{} distinct subjects cannot fill {k} folds",
            ages.len()
        )));
    }
    let mut order: Vec<(&str, f64)> = ages.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by(|a, b| a.1.total_cmp(&b.1));

    let assignment = order
        .iter()
        .enumerate()
        .map(|(i, (s, _))| {
            let (round, pos) = (i / k, i % k);
            let fold = if round % 2 == 0 { pos } else { k - 1 - pos };
            (s.to_string(), fold)
        })
        .collect();
    Ok(FoldPlan { k, assignment })
}

/// Splits scans (given by their subject ids) into training and validation
/// index sets. Whole subjects, in seeded random order, move to validation
/// until it holds at least `frac` of the scans.
pub fn select_validation(
    subject_of_scan: &[&str],
    frac: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::invalid(format!(
            "validation fraction must be in (0, 1), got {frac}"
        )));
    }
    let total = subject_of_scan.len();
    let need = ((frac * total as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut subjects: Vec<&str> = subject_of_scan
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut val_subjects = BTreeSet::new();
    let mut count = 0;
    for s in subjects {
        if count >= need {
            break;
        }
        count += subject_of_scan.iter().filter(|&&x| x == s).count();
        val_subjects.insert(s);
    }
    let (val, train): (Vec<usize>, Vec<usize>) =
        (0..total).partition(|&i| val_subjects.contains(subject_of_scan[i]));
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(format!(
            "cannot carve a {frac} validation split from {total} scans of {} subjects into two non-empty parts",
            subject_of_scan.iter().collect::<BTreeSet<_>>().len()
        )));
    }
    Ok((train, val))
}

//! On-disk dataset formats, scan loading and subject-level splits.

mod cache;
mod formats;
mod manifest;
mod splits;

pub use cache::{
    load_prepared, preprocess_dataset, PrepOutcome, PrepReport, PreparedEntry, PreparedIndex,
};
pub use formats::{
    read_column, read_series, read_table, write_column, write_series, write_table, Table,
};
pub use manifest::{load_manifest, Manifest, ScanEntry};
pub use splits::{make_age_balanced_folds, select_validation, FoldPlan};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::{self, compute_hr, compute_rv, BeatTrain, FilterSpec, SampledSeries, TrGrid};

/// Conditioning applied to every ROI column and both targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepSettings {
    pub filter: FilterSpec,
    /// Common output grid, seconds.
    pub target_dt: f64,
    pub rv_window_s: f64,
    pub hr_window_s: f64,
}

impl Default for PrepSettings {
    fn default() -> Self {
        Self {
            filter: FilterSpec::default(),
            target_dt: 1.44,
            rv_window_s: 6.0,
            hr_window_s: 6.0,
        }
    }
}

impl PrepSettings {
    /// SHA-256 of the canonical JSON form. Floats serialize in round-trip
    /// form, so any bit change alters the hash.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("settings serialize");
        hex::encode(Sha256::digest(json))
    }
}

/// Physiological target series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Rv,
    Hr,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Rv => "RV",
            Target::Hr => "HR",
        }
    }
}

/// A preprocessed scan on the common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub scan_id: String,
    pub subject_id: String,
    pub age: f64,
    pub roi_names: Vec<String>,
    /// `[len, n_roi]` row-major, z-normalized per column.
    pub roi: Vec<f64>,
    pub rv: Vec<f64>,
    pub hr: Vec<f64>,
    pub dt: f64,
}

impl Scan {
    pub fn len(&self) -> usize {
        self.rv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rv.is_empty()
    }

    pub fn n_roi(&self) -> usize {
        self.roi_names.len()
    }

    pub fn target(&self, t: Target) -> &[f64] {
        match t {
            Target::Rv => &self.rv,
            Target::Hr => &self.hr,
        }
    }

    /// SHA-256 over the little-endian bytes of ROI, RV and HR values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.roi.iter().chain(&self.rv).chain(&self.hr) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn chain(x: &SampledSeries<f64>, prep: &PrepSettings) -> Result<Vec<f64>> {
    Ok(signal::preprocess_chain(x, &prep.filter, prep.target_dt)?.values)
}

fn target_series(
    what: &str,
    series_path: Option<&std::path::Path>,
    raw: Option<Result<SampledSeries<f64>>>,
    prep: &PrepSettings,
) -> Result<Vec<f64>> {
    let series = match (series_path, raw) {
        (Some(p), _) => formats::read_series(p)?,
        (None, Some(raw)) => raw?,
        (None, None) => return Err(Error::invalid(format!("no {what} source listed"))),
    };
    chain(&series, prep)
}

/// Reads one scan's files and conditions everything onto the common grid.
pub fn load_scan(entry: &ScanEntry, manifest: &Manifest, prep: &PrepSettings) -> Result<Scan> {
    load_scan_inner(entry, manifest, prep)
        .map_err(|e| e.in_stage(format!("scan '{}'", entry.scan_id)))
}

fn load_scan_inner(entry: &ScanEntry, manifest: &Manifest, prep: &PrepSettings) -> Result<Scan> {
    let table = formats::read_table(&entry.roi_path).map_err(|e| e.in_stage("read ROI"))?;
    let grid = TrGrid::new(manifest.tr_seconds, table.rows).map_err(|e| e.in_stage("read ROI"))?;

    let mut columns = Vec::with_capacity(table.columns.len());
    for (j, name) in table.columns.iter().enumerate() {
        let raw = SampledSeries::new(table.column(j), manifest.tr_seconds)?;
        let col = chain(&raw, prep).map_err(|e| e.in_stage(format!("ROI column '{name}'")))?;
        columns.push(col);
    }

    let rv_raw = entry
        .resp_path
        .as_ref()
        .filter(|_| entry.rv_path.is_none())
        .map(|p| {
            let resp = SampledSeries::new(formats::read_column(p)?, 1.0 / manifest.physio_hz)?;
            compute_rv(&resp, &grid, prep.rv_window_s)
        });
    let rv = target_series("RV", entry.rv_path.as_deref(), rv_raw, prep)
        .map_err(|e| e.in_stage("RV"))?;

    let hr_raw = entry
        .beats_path
        .as_ref()
        .filter(|_| entry.hr_path.is_none())
        .map(|p| {
            let beats = BeatTrain::new(formats::read_column(p)?)?;
            compute_hr(&beats, &grid, prep.hr_window_s)
        });
    let hr = target_series("HR", entry.hr_path.as_deref(), hr_raw, prep)
        .map_err(|e| e.in_stage("HR"))?;

    let len = columns
        .iter()
        .map(Vec::len)
        .chain([rv.len(), hr.len()])
        .min()
        .expect("at least one ROI column");
    let n_roi = columns.len();
    let mut roi = Vec::with_capacity(len * n_roi);
    for i in 0..len {
        roi.extend(columns.iter().map(|c| c[i]));
    }
    Ok(Scan {
        scan_id: entry.scan_id.clone(),
        subject_id: entry.subject_id.clone(),
        age: entry.age,
        roi_names: table.columns,
        roi,
        rv: rv[..len].to_vec(),
        hr: hr[..len].to_vec(),
        dt: prep.target_dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_hash_is_stable_and_sensitive() {
        let a = PrepSettings::default();
        assert_eq!(a.hash(), PrepSettings::default().hash());
        assert_eq!(a.hash().len(), 64);
        let mut b = a.clone();
        b.filter.high_hz = f64::from_bits(b.filter.high_hz.to_bits() ^ 1);
        assert_ne!(a.hash(), b.hash());
    }
}

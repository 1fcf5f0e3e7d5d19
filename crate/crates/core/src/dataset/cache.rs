//! Prepared-dataset directory: one ROI table, one target table and one JSON
//! sidecar per scan, plus `prepared.json` listing everything.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::formats::{read_table, write_table, Table};
use super::{load_scan, Manifest, PrepSettings, Scan, ScanEntry};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "prepared.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    scan_id: String,
    subject_id: String,
    age: f64,
    dt: f64,
    roi_names: Vec<String>,
    settings_hash: String,
    source_hash: String,
    content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedEntry {
    pub scan_id: String,
    pub subject_id: String,
    pub age: f64,
    pub len: usize,
    pub n_roi: usize,
    pub file_stem: String,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedIndex {
    pub dataset_name: String,
    pub settings: PrepSettings,
    pub settings_hash: String,
    pub scans: Vec<PreparedEntry>,
}

#[derive(Debug)]
pub enum PrepOutcome {
    Written,
    /// Sidecar hashes matched; nothing was recomputed.
    Skipped,
    Failed(Error),
}

#[derive(Debug)]
pub struct PrepReport {
    pub outcomes: Vec<(String, PrepOutcome)>,
}

impl PrepReport {
    fn count(&self, f: impl Fn(&PrepOutcome) -> bool) -> usize {
        self.outcomes.iter().filter(|(_, o)| f(o)).count()
    }

    pub fn written(&self) -> usize {
        self.count(|o| matches!(o, PrepOutcome::Written))
    }

    pub fn skipped(&self) -> usize {
        self.count(|o| matches!(o, PrepOutcome::Skipped))
    }

    pub fn failed(&self) -> usize {
        self.count(|o| matches!(o, PrepOutcome::Failed(_)))
    }
}

fn file_stem(scan_id: &str) -> String {
    scan_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn paths(dir: &Path, stem: &str) -> [PathBuf; 3] {
    let scans = dir.join("scans");
    [
        scans.join(format!("{stem}.json")),
        scans.join(format!("{stem}.roi.csv")),
        scans.join(format!("{stem}.targets.csv")),
    ]
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Hash of everything a scan's preprocessing reads: metadata, grid
/// parameters and the bytes of each referenced file.
fn source_hash(entry: &ScanEntry, manifest: &Manifest) -> Result<String> {
    let mut h = Sha256::new();
    h.update(format!(
        "{}\0{}\0{}\0{}\0{}\0",
        entry.scan_id, entry.subject_id, entry.age, manifest.tr_seconds, manifest.physio_hz
    ));
    let files = [
        ("roi", Some(&entry.roi_path)),
        ("rv", entry.rv_path.as_ref()),
        ("hr", entry.hr_path.as_ref()),
        ("resp", entry.resp_path.as_ref()),
        ("beats", entry.beats_path.as_ref()),
    ];
    for (label, path) in files {
        if let Some(p) = path {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            h.update(label);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn fresh_sidecar(dir: &Path, stem: &str, settings_hash: &str, source: &str) -> Option<Sidecar> {
    let [meta, roi, targets] = paths(dir, stem);
    let sc: Sidecar = read_json(&meta).ok()?;
    (sc.settings_hash == settings_hash
        && sc.source_hash == source
        && roi.is_file()
        && targets.is_file())
    .then_some(sc)
}

fn write_scan(dir: &Path, stem: &str, scan: &Scan, sidecar: &Sidecar) -> Result<()> {
    let [meta, roi, targets] = paths(dir, stem);
    let table = Table {
        columns: scan.roi_names.clone(),
        rows: scan.len(),
        values: scan.roi.clone(),
    };
    write_table(&roi, &table)?;
    let t = Table::from_columns(
        vec!["rv".into(), "hr".into()],
        &[scan.rv.clone(), scan.hr.clone()],
    )?;
    write_table(&targets, &t)?;
    // Sidecar last, so an interrupted write is never mistaken for fresh.
    write_json(&meta, sidecar)
}

fn prepare_one(
    entry: &ScanEntry,
    manifest: &Manifest,
    settings: &PrepSettings,
    settings_hash: &str,
    dir: &Path,
) -> Result<(PrepOutcome, PreparedEntry)> {
    let stem = file_stem(&entry.scan_id);
    let source = source_hash(entry, manifest)
        .map_err(|e| e.in_stage(format!("scan '{}'", entry.scan_id)))?;
    if let Some(sc) = fresh_sidecar(dir, &stem, settings_hash, &source) {
        let [_, _, targets] = paths(dir, &stem);
        let len = read_table(&targets)?.rows;
        let prepared = PreparedEntry {
            scan_id: sc.scan_id,
            subject_id: sc.subject_id,
            age: sc.age,
            len,
            n_roi: sc.roi_names.len(),
            file_stem: stem,
            content_hash: sc.content_hash,
        };
        return Ok((PrepOutcome::Skipped, prepared));
    }
    let scan = load_scan(entry, manifest, settings)?;
    let sidecar = Sidecar {
        scan_id: scan.scan_id.clone(),
        subject_id: scan.subject_id.clone(),
        age: scan.age,
        dt: scan.dt,
        roi_names: scan.roi_names.clone(),
        settings_hash: settings_hash.to_string(),
        source_hash: source,
        content_hash: scan.content_hash(),
    };
    write_scan(dir, &stem, &scan, &sidecar)?;
    let prepared = PreparedEntry {
        scan_id: scan.scan_id,
        subject_id: scan.subject_id,
        age: scan.age,
        len: scan.rv.len(),
        n_roi: sidecar.roi_names.len(),
        file_stem: stem,
        content_hash: sidecar.content_hash,
    };
    Ok((PrepOutcome::Written, prepared))
}

/// Preprocesses every manifest scan into `out_dir`, in parallel. Scans whose
/// sidecar already records the same settings and source hashes are skipped.
///
/// Without `keep_going` the first failing scan (in manifest order) aborts
/// and no index is written. With it, failures are reported and the index
/// lists only the scans that succeeded.
pub fn preprocess_dataset(
    manifest: &Manifest,
    settings: &PrepSettings,
    out_dir: &Path,
    keep_going: bool,
) -> Result<PrepReport> {
    let settings_hash = settings.hash();
    let scans_dir = out_dir.join("scans");
    fs::create_dir_all(&scans_dir).map_err(|e| Error::io(&scans_dir, e))?;

    let results: Vec<Result<(PrepOutcome, PreparedEntry)>> = manifest
        .scans
        .par_iter()
        .map(|e| prepare_one(e, manifest, settings, &settings_hash, out_dir))
        .collect();

    let mut outcomes = Vec::with_capacity(results.len());
    let mut entries = Vec::new();
    for (entry, r) in manifest.scans.iter().zip(results) {
        match r {
            Ok((outcome, prepared)) => {
                entries.push(prepared);
                outcomes.push((entry.scan_id.clone(), outcome));
            }
            Err(e) if keep_going => {
                log::warn!("skipping scan '{}': {e}", entry.scan_id);
                outcomes.push((entry.scan_id.clone(), PrepOutcome::Failed(e)));
            }
            Err(e) => return Err(e),
        }
    }
    if entries.is_empty() {
        return Err(Error::invalid("no scan could be preprocessed"));
    }
    let index = PreparedIndex {
        dataset_name: manifest.dataset_name.clone(),
        settings: settings.clone(),
        settings_hash,
        scans: entries,
    };
    write_json(&out_dir.join(INDEX_FILE), &index)?;
    Ok(PrepReport { outcomes })
}

fn read_index(dir: &Path) -> Result<PreparedIndex> {
    let path = dir.join(INDEX_FILE);
    let index: PreparedIndex = read_json(&path)?;
    let recomputed = index.settings.hash();
    if recomputed != index.settings_hash {
        return Err(Error::HashMismatch {
            expected: index.settings_hash,
            found: recomputed,
        }
        .in_stage(format!("{}", path.display())));
    }
    Ok(index)
}

fn read_scan(dir: &Path, entry: &PreparedEntry, settings_hash: &str) -> Result<Scan> {
    let [meta, roi_path, targets_path] = paths(dir, &entry.file_stem);
    let sc: Sidecar = read_json(&meta)?;
    if sc.settings_hash != settings_hash {
        return Err(Error::HashMismatch {
            expected: settings_hash.to_string(),
            found: sc.settings_hash,
        });
    }
    let roi = read_table(&roi_path)?;
    let targets = read_table(&targets_path)?;
    if targets.columns != ["rv", "hr"] || roi.rows != targets.rows || roi.columns != sc.roi_names {
        return Err(Error::parse(
            &targets_path,
            "prepared files disagree with their sidecar",
        ));
    }
    let scan = Scan {
        scan_id: sc.scan_id,
        subject_id: sc.subject_id,
        age: sc.age,
        roi_names: roi.columns,
        roi: roi.values,
        rv: targets.column(0),
        hr: targets.column(1),
        dt: sc.dt,
    };
    if scan.content_hash() != sc.content_hash {
        return Err(Error::parse(
            &roi_path,
            "content hash does not match sidecar",
        ));
    }
    Ok(scan)
}

/// Loads a prepared directory. With `expected` set, its settings hash must
/// equal the one the directory was built with.
pub fn load_prepared(
    dir: &Path,
    expected: Option<&PrepSettings>,
) -> Result<(PreparedIndex, Vec<Scan>)> {
    let index = read_index(dir)?;
    if let Some(exp) = expected {
        let want = exp.hash();
        if want != index.settings_hash {
            return Err(Error::HashMismatch {
                expected: want,
                found: index.settings_hash,
            });
        }
    }
    let scans = index
        .scans
        .par_iter()
        .map(|e| {
            read_scan(dir, e, &index.settings_hash)
                .map_err(|err| err.in_stage(format!("scan '{}'", e.scan_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index, scans))
}

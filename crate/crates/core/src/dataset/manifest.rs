use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scan's metadata and file locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanEntry {
    pub scan_id: String,
    pub subject_id: String,
    pub age: f64,
    pub roi_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rv_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resp_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beats_path: Option<PathBuf>,
}

impl ScanEntry {
    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        std::iter::once(&mut self.roi_path).chain(
            [
                &mut self.rv_path,
                &mut self.hr_path,
                &mut self.resp_path,
                &mut self.beats_path,
            ]
            .into_iter()
            .flatten(),
        )
    }
}

/// Dataset description. After [`load_manifest`] every path is resolved
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dataset_name: String,
    pub tr_seconds: f64,
    pub physio_hz: f64,
    pub scans: Vec<ScanEntry>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let bad =
            |field: &str, msg: String| Error::invalid(format!("manifest field '{field}': {msg}"));
        if !(self.tr_seconds > 0.0 && self.tr_seconds.is_finite()) {
            return Err(bad(
                "tr_seconds",
                format!("must be > 0, got {}", self.tr_seconds),
            ));
        }
        if !(self.physio_hz > 0.0 && self.physio_hz.is_finite()) {
            return Err(bad(
                "physio_hz",
                format!("must be > 0, got {}", self.physio_hz),
            ));
        }
        if self.scans.is_empty() {
            return Err(bad("scans", "no scans listed".into()));
        }
        let mut seen = HashSet::new();
        for (i, s) in self.scans.iter().enumerate() {
            if s.scan_id.is_empty() {
                return Err(bad(&format!("scans[{i}].scan_id"), "empty id".into()));
            }
            if s.subject_id.is_empty() {
                return Err(bad(&format!("scans[{i}].subject_id"), "empty id".into()));
            }
            if !seen.insert(s.scan_id.as_str()) {
                return Err(bad(
                    &format!("scans[{i}].scan_id"),
                    format!("duplicate scan id '{}'", s.scan_id),
                ));
            }
            if !(0.0..=130.0).contains(&s.age) {
                return Err(bad(
                    &format!("scans[{i}].age"),
                    format!("{} outside [0, 130]", s.age),
                ));
            }
        }
        Ok(())
    }

    pub fn entry(&self, scan_id: &str) -> Option<&ScanEntry> {
        self.scans.iter().find(|s| s.scan_id == scan_id)
    }

    /// Writes the manifest as pretty JSON; paths are written as stored.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::parse(path, e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Parses and validates a manifest. Referenced files are not opened here.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    manifest
        .validate()
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for scan in &mut manifest.scans {
        for p in scan.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(manifest)
}

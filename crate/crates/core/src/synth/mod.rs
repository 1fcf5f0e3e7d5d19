//! Synthetic datasets whose ROI channels carry known lagged linear encodings
//! of latent RV and HR.

mod oracle;

pub use oracle::LinearOracle;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    load_manifest, write_column, write_series, write_table, Manifest, ScanEntry, Table,
};
use crate::error::{Error, Result};
use crate::signal::{population_std, SampledSeries};

/// Raw-mode acquisition constants.
pub const RAW_TR: f64 = 0.72;
pub const RAW_PHYSIO_HZ: f64 = 400.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub dataset_name: String,
    pub n_subjects: usize,
    pub scans_per_subject: usize,
    pub n_roi: usize,
    /// Length on the 1.44 s grid.
    pub len: usize,
    pub dt: f64,
    pub snr: f64,
    /// Longest encoding kernel, in samples of `dt`.
    pub lag_max: usize,
    pub age_range: [f64; 2],
    pub seed: u64,
    /// Seed for gains and kernels; defaults to `seed`. Two datasets that
    /// share it share their encoding.
    pub encoding_seed: Option<u64>,
    /// Extra delay, in samples, prepended to every encoding kernel.
    pub kernel_shift: usize,
    /// Latent band edges, Hz.
    pub band: [f64; 2],
    /// Emit 400 Hz respiration and beat times at TR 0.72 s instead of
    /// ready-made targets on the final grid.
    pub raw_mode: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dataset_name: "synth".into(),
            n_subjects: 40,
            scans_per_subject: 1,
            n_roi: 64,
            len: 271,
            dt: 1.44,
            snr: 5.0,
            lag_max: 5,
            age_range: [36.0, 89.0],
            seed: 0,
            encoding_seed: None,
            kernel_shift: 0,
            band: [0.01, 0.15],
            raw_mode: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad =
            |field: &str, msg: String| Error::invalid(format!("synth field '{field}': {msg}"));
        for (field, v) in [
            ("n_subjects", self.n_subjects),
            ("scans_per_subject", self.scans_per_subject),
            ("n_roi", self.n_roi),
            ("lag_max", self.lag_max),
        ] {
            if v == 0 {
                return Err(bad(field, "must be positive".into()));
            }
        }
        if self.len < 20 {
            return Err(bad("len", format!("must be >= 20, got {}", self.len)));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(bad("snr", format!("must be > 0, got {}", self.snr)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(bad("dt", format!("must be > 0, got {}", self.dt)));
        }
        let [lo, hi] = self.age_range;
        if !(0.0 <= lo && lo <= hi && hi <= 130.0) {
            return Err(bad(
                "age_range",
                format!("[{lo}, {hi}] is not inside [0, 130]"),
            ));
        }
        let nyquist = 0.5 / self.dt;
        if !(0.0 < self.band[0] && self.band[0] < self.band[1] && self.band[1] < nyquist) {
            return Err(bad(
                "band",
                format!("{:?} must satisfy 0 < low < high < {nyquist}", self.band),
            ));
        }
        if self.raw_mode && (self.dt / RAW_TR - 2.0).abs() > 1e-9 {
            return Err(bad("dt", "raw mode requires dt = 2 x 0.72 s".into()));
        }
        Ok(())
    }

    pub fn n_scans(&self) -> usize {
        self.n_subjects * self.scans_per_subject
    }
}

/// Dataset-wide mixing: ROI i receives `rv_gain[i] * (rv_kernel[i] * RV)`
/// plus the HR term, before noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    pub rv_gain: Vec<f64>,
    pub hr_gain: Vec<f64>,
    pub rv_kernel: Vec<Vec<f64>>,
    pub hr_kernel: Vec<Vec<f64>>,
}

impl Encoding {
    pub fn generate(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.encoding_seed.unwrap_or(cfg.seed));
        rng.set_stream(u64::MAX);
        let kernel = |rng: &mut ChaCha8Rng| {
            let taps = rng.random_range(1..=cfg.lag_max);
            let mut h: Vec<f64> = (0..taps).map(|_| StandardNormal.sample(rng)).collect();
            let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            h.iter_mut().for_each(|v| *v /= norm);
            let mut shifted = vec![0.0; cfg.kernel_shift];
            shifted.extend(h);
            shifted
        };
        let mut rv_gain = Vec::with_capacity(cfg.n_roi);
        let mut hr_gain = Vec::with_capacity(cfg.n_roi);
        let mut rv_kernel = Vec::with_capacity(cfg.n_roi);
        let mut hr_kernel = Vec::with_capacity(cfg.n_roi);
        for _ in 0..cfg.n_roi {
            rv_gain.push(rng.random_range(-1.0..1.0));
            hr_gain.push(rng.random_range(-1.0..1.0));
            rv_kernel.push(kernel(&mut rng));
            hr_kernel.push(kernel(&mut rng));
        }
        Self {
            rv_gain,
            hr_gain,
            rv_kernel,
            hr_kernel,
        }
    }

    fn max_delay(&self) -> usize {
        self.rv_kernel
            .iter()
            .chain(&self.hr_kernel)
            .map(Vec::len)
            .max()
            .unwrap_or(1)
            - 1
    }
}

/// One generated scan on its native grid (the final grid, or TR 0.72 s in
/// raw mode).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScan {
    pub scan_id: String,
    pub subject_id: String,
    pub age: f64,
    /// `[len, n_roi]` row-major, z-normalized per column.
    pub roi: Vec<f64>,
    pub rv: Vec<f64>,
    pub hr: Vec<f64>,
    pub dt: f64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn znorm_in_place(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = population_std(x);
    x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

/// White Gaussian noise projected onto `[lo, hi]` Hz by zeroing DFT bins,
/// then z-normalized.
pub fn band_limited_noise<R: Rng + ?Sized>(
    rng: &mut R,
    len: usize,
    dt: f64,
    band: [f64; 2],
) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..len)
        .map(|_| Complex64::new(StandardNormal.sample(&mut *rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(len - k) as f64 / (len as f64 * dt);
        if f < band[0] || f > band[1] {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    znorm_in_place(&mut out);
    out
}

/// `sum_k h[k] x[t - k*stride]`, with `x` starting `warm` samples early.
fn causal_fir(x: &[f64], h: &[f64], stride: usize, warm: usize, len: usize) -> Vec<f64> {
    (0..len)
        .map(|t| {
            h.iter()
                .enumerate()
                .map(|(k, hk)| hk * x[warm + t - k * stride])
                .sum::<f64>()
        })
        .collect()
}

fn synth_scan(cfg: &SynthConfig, enc: &Encoding, index: usize, age: f64) -> SynthScan {
    let mut rng = stream_rng(cfg.seed, index as u64);
    let (dt, len, stride) = if cfg.raw_mode {
        (RAW_TR, 2 * (cfg.len - 1) + 1, 2)
    } else {
        (cfg.dt, cfg.len, 1)
    };
    let warm = enc.max_delay() * stride;
    let rv_full = band_limited_noise(&mut rng, len + warm, dt, cfg.band);
    let hr_full = band_limited_noise(&mut rng, len + warm, dt, cfg.band);

    let r = cfg.n_roi;
    let mut roi = vec![0.0; len * r];
    let mut col = vec![0.0; len];
    for i in 0..r {
        let rv_part = causal_fir(&rv_full, &enc.rv_kernel[i], stride, warm, len);
        let hr_part = causal_fir(&hr_full, &enc.hr_kernel[i], stride, warm, len);
        for ((c, a), b) in col.iter_mut().zip(rv_part).zip(hr_part) {
            *c = enc.rv_gain[i] * a + enc.hr_gain[i] * b;
        }
        let sigma = population_std(&col) / cfg.snr.sqrt();
        for c in col.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *c += sigma * e;
        }
        znorm_in_place(&mut col);
        for (t, v) in col.iter().enumerate() {
            roi[t * r + i] = *v;
        }
    }
    let subject = index / cfg.scans_per_subject;
    let within = index % cfg.scans_per_subject;
    SynthScan {
        scan_id: format!("sub-{subject:03}_scan-{within}"),
        subject_id: format!("sub-{subject:03}"),
        age,
        roi,
        rv: rv_full[warm..].to_vec(),
        hr: hr_full[warm..].to_vec(),
        dt,
    }
}

fn subject_ages(cfg: &SynthConfig) -> Vec<f64> {
    let mut rng = stream_rng(cfg.seed, u64::MAX - 1);
    let [lo, hi] = cfg.age_range;
    (0..cfg.n_subjects)
        .map(|_| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        })
        .map(|a: f64| (a * 10.0).round() / 10.0)
        .collect()
}

/// Generates every scan in memory. Each scan draws from its own RNG stream,
/// so results do not depend on thread scheduling.
pub fn synthesize(cfg: &SynthConfig) -> Result<(Encoding, Vec<SynthScan>)> {
    cfg.validate()?;
    let enc = Encoding::generate(cfg);
    let ages = subject_ages(cfg);
    let scans = (0..cfg.n_scans())
        .into_par_iter()
        .map(|i| synth_scan(cfg, &enc, i, ages[i / cfg.scans_per_subject]))
        .collect();
    Ok((enc, scans))
}

fn interp(x: &[f64], dt: f64, t: f64) -> f64 {
    let pos = (t / dt).clamp(0.0, (x.len() - 1) as f64);
    let i = (pos.floor() as usize).min(x.len() - 2);
    let frac = pos - i as f64;
    x[i] * (1.0 - frac) + x[i + 1] * frac
}

/// Respiration whose amplitude envelope follows the RV latent.
fn respiration(scan: &SynthScan, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let duration = scan.rv.len() as f64 * scan.dt;
    let n = (duration * RAW_PHYSIO_HZ).ceil() as usize;
    let f0 = rng.random_range(0.25..0.32);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    (0..n)
        .map(|k| {
            let t = k as f64 / RAW_PHYSIO_HZ;
            let env = (1.5 + 0.4 * interp(&scan.rv, scan.dt, t)).max(0.1);
            env * (std::f64::consts::TAU * f0 * t + phase).sin()
        })
        .collect()
}

/// Beat times from an integrate-and-fire process whose rate follows the HR
/// latent.
fn beats(scan: &SynthScan, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let duration = scan.hr.len() as f64 * scan.dt;
    let base = rng.random_range(1.0..1.3);
    let step = 1.0 / RAW_PHYSIO_HZ;
    let mut phase = rng.random_range(0.0..1.0);
    let mut out = Vec::new();
    let mut t = 0.0;
    while t < duration {
        let rate = base * (1.0 + 0.1 * interp(&scan.hr, scan.dt, t)).max(0.3);
        phase += rate * step;
        if phase >= 1.0 {
            phase -= 1.0;
            out.push(t);
        }
        t += step;
    }
    out
}

#[derive(Serialize)]
struct Sidecar<'a> {
    config: &'a SynthConfig,
    encoding: &'a Encoding,
}

/// Writes a dataset in the standard on-disk formats plus `synth.json`
/// (configuration and encoding). Returns the loaded manifest.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    let (enc, scans) = synthesize(cfg)?;
    for sub in ["roi", "physio"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let roi_names: Vec<String> = (0..cfg.n_roi).map(|i| format!("roi_{i:03}")).collect();
    let entries = scans
        .par_iter()
        .enumerate()
        .map(|(index, scan)| {
            let id = &scan.scan_id;
            let roi_rel = format!("roi/{id}.csv");
            let table = Table {
                columns: roi_names.clone(),
                rows: scan.rv.len(),
                values: scan.roi.clone(),
            };
            write_table(&out_dir.join(&roi_rel), &table)?;
            let mut entry = ScanEntry {
                scan_id: id.clone(),
                subject_id: scan.subject_id.clone(),
                age: scan.age,
                roi_path: roi_rel.into(),
                rv_path: None,
                hr_path: None,
                resp_path: None,
                beats_path: None,
            };
            if cfg.raw_mode {
                let mut rng = stream_rng(cfg.seed ^ 0x5e_ed0f_b0d1, index as u64);
                let resp_rel = format!("physio/{id}_resp.txt");
                let beats_rel = format!("physio/{id}_beats.txt");
                write_column(&out_dir.join(&resp_rel), &respiration(scan, &mut rng))?;
                write_column(&out_dir.join(&beats_rel), &beats(scan, &mut rng))?;
                entry.resp_path = Some(resp_rel.into());
                entry.beats_path = Some(beats_rel.into());
            } else {
                let rv_rel = format!("physio/{id}_rv.csv");
                let hr_rel = format!("physio/{id}_hr.csv");
                write_series(
                    &out_dir.join(&rv_rel),
                    &SampledSeries::new(scan.rv.clone(), scan.dt)?,
                )?;
                write_series(
                    &out_dir.join(&hr_rel),
                    &SampledSeries::new(scan.hr.clone(), scan.dt)?,
                )?;
                entry.rv_path = Some(rv_rel.into());
                entry.hr_path = Some(hr_rel.into());
            }
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        dataset_name: cfg.dataset_name.clone(),
        tr_seconds: if cfg.raw_mode { RAW_TR } else { cfg.dt },
        physio_hz: RAW_PHYSIO_HZ,
        scans: entries,
    };
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    let sidecar = serde_json::to_string_pretty(&Sidecar {
        config: cfg,
        encoding: &enc,
    })
    .expect("serializable");
    let side = out_dir.join("synth.json");
    fs::write(&side, sidecar + "\n").map_err(|e| Error::io(&side, e))?;
    load_manifest(&path)
}

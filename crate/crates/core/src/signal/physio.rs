//! Respiratory volume and heart rate on the fMRI volume grid.

use serde::{Deserialize, Serialize};

use super::{population_std, SampledSeries};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Acquisition grid of the fMRI volumes: volume `k` sits at `k * tr_seconds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrGrid {
    pub tr_seconds: f64,
    pub n_volumes: usize,
}

impl TrGrid {
    pub fn new(tr_seconds: f64, n_volumes: usize) -> Result<Self> {
        if !(tr_seconds > 0.0 && tr_seconds.is_finite()) {
            return Err(Error::invalid(format!("TR must be > 0, got {tr_seconds}")));
        }
        if n_volumes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 volumes, got {n_volumes}"
            )));
        }
        Ok(Self {
            tr_seconds,
            n_volumes,
        })
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.tr_seconds
    }
}

/// Heartbeat timestamps in seconds, strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatTrain {
    times: Vec<f64>,
}

impl BeatTrain {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if let Some(i) = times.iter().position(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("beat timestamp {i}")));
        }
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "beat timestamps must be strictly increasing (index {})",
                i + 1
            )));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

const EDGE_TOL: f64 = 1e-9;

fn check_window(window_s: f64) -> Result<()> {
    if window_s > 0.0 && window_s.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "window length must be > 0, got {window_s}"
        )))
    }
}

/// Windowed standard deviation of the respiration trace centred on each TR.
///
/// Window `k` holds every sample with timestamp in
/// `[t_k - window_s/2, t_k + window_s/2]`, truncated at the recording edges.
pub fn compute_rv<T: Real>(
    resp: &SampledSeries<T>,
    grid: &TrGrid,
    window_s: f64,
) -> Result<SampledSeries<T>> {
    check_window(window_s)?;
    resp.check_finite()?;
    let n = resp.len();
    let half = window_s / 2.0;
    let mut out = Vec::with_capacity(grid.n_volumes);
    for k in 0..grid.n_volumes {
        let t = grid.time(k);
        let lo = ((t - half - resp.t0) / resp.dt - EDGE_TOL).ceil().max(0.0) as usize;
        let hi_f = ((t + half - resp.t0) / resp.dt + EDGE_TOL).floor();
        if hi_f < 0.0 || lo >= n {
            return Err(Error::invalid(format!(
                "RV window at TR index {k} (t = {t} s) contains fewer than 2 samples"
            )));
        }
        let hi = (hi_f as usize).min(n - 1);
        if hi < lo + 1 {
            return Err(Error::invalid(format!(
                "RV window at TR index {k} (t = {t} s) contains fewer than 2 samples"
            )));
        }
        out.push(population_std(&resp.values[lo..=hi]));
    }
    SampledSeries::new(out, grid.tr_seconds)
}

/// Heart rate in beats per minute, `60 / mean(IBI)` over beats inside the
/// window centred on each TR. Windows with fewer than two beats copy the
/// nearest valid estimate (earlier one on ties).
pub fn compute_hr<T: Real>(
    beats: &BeatTrain,
    grid: &TrGrid,
    window_s: f64,
) -> Result<SampledSeries<T>> {
    check_window(window_s)?;
    let times = beats.times();
    let half = window_s / 2.0;
    let estimates: Vec<Option<f64>> = (0..grid.n_volumes)
        .map(|k| {
            let t = grid.time(k);
            let lo = times.partition_point(|&b| b < t - half - EDGE_TOL);
            let hi = times.partition_point(|&b| b <= t + half + EDGE_TOL);
            if hi >= lo + 2 {
                // mean IBI telescopes to span / count
                let mean_ibi = (times[hi - 1] - times[lo]) / (hi - lo - 1) as f64;
                Some(60.0 / mean_ibi)
            } else {
                None
            }
        })
        .collect();

    let valid: Vec<usize> = estimates
        .iter()
        .enumerate()
        .filter_map(|(k, e)| e.map(|_| k))
        .collect();
    if valid.is_empty() {
        return Err(Error::invalid(
            "no TR window contains two beats; heart rate undefined for the whole recording",
        ));
    }
    let mut out = Vec::with_capacity(grid.n_volumes);
    for (k, e) in estimates.iter().enumerate() {
        let value = match e {
            Some(v) => *v,
            None => {
                let j = valid.partition_point(|&v| v < k);
                let nearest = match (j.checked_sub(1).map(|i| valid[i]), valid.get(j).copied()) {
                    (Some(a), Some(b)) => {
                        if k - a <= b - k {
                            a
                        } else {
                            b
                        }
                    }
                    (Some(a), None) => a,
                    (None, Some(b)) => b,
                    (None, None) => unreachable!("valid is non-empty"),
                };
                estimates[nearest].expect("nearest index is valid")
            }
        };
        out.push(T::lit(value));
    }
    SampledSeries::new(out, grid.tr_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn resp(f: impl Fn(f64) -> f64, seconds: f64) -> SampledSeries<f64> {
        let hz = 400.0;
        let n = (seconds * hz) as usize + 1;
        SampledSeries::new((0..n).map(|i| f(i as f64 / hz)).collect(), 1.0 / hz).unwrap()
    }

    #[test]
    fn rv_of_constant_is_zero() {
        let r = resp(|_| 3.0, 60.0);
        let grid = TrGrid::new(0.8, 70).unwrap();
        let rv = compute_rv(&r, &grid, 6.0).unwrap();
        assert_eq!(rv.len(), 70);
        assert_eq!(rv.dt, 0.8);
        assert!(rv.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rv_of_sinusoid_is_amplitude_over_root_two() {
        let amp = 2.5;
        // 0.3 Hz over a 6 s window is 1.8 cycles; use 0.5 Hz so the window
        // spans whole cycles (3 cycles).
        let r = resp(|t| amp * (2.0 * PI * 0.5 * t).sin(), 120.0);
        let grid = TrGrid::new(0.72, 150).unwrap();
        let rv = compute_rv(&r, &grid, 6.0).unwrap();
        for k in 5..145 {
            let rel = (rv.values[k] - amp / 2f64.sqrt()).abs() / (amp / 2f64.sqrt());
            assert!(rel < 0.01, "TR {k}: {}", rv.values[k]);
        }
        assert!(rv.values.iter().all(|v| *v >= 0.0));

        // 0.3 Hz breathing with a window of exactly two cycles
        let r = resp(|t| amp * (2.0 * PI * 0.3 * t).sin(), 120.0);
        let rv = compute_rv(&r, &grid, 2.0 / 0.3).unwrap();
        for k in 5..145 {
            let rel = (rv.values[k] - amp / 2f64.sqrt()).abs() / (amp / 2f64.sqrt());
            assert!(rel < 0.01, "TR {k}: {}", rv.values[k]);
        }
    }

    #[test]
    fn rv_errors_on_sparse_windows() {
        let coarse = SampledSeries::new(vec![1.0, 2.0, 3.0, 4.0], 10.0).unwrap();
        let grid = TrGrid::new(0.8, 10).unwrap();
        let err = compute_rv(&coarse, &grid, 6.0).unwrap_err();
        assert!(err.to_string().contains("TR index 0"), "{err}");
    }

    #[test]
    fn hr_of_regular_beats() {
        let grid = TrGrid::new(0.72, 100).unwrap();
        let every_second = BeatTrain::new((0..=80).map(|i| i as f64).collect()).unwrap();
        let hr: SampledSeries<f64> = compute_hr(&every_second, &grid, 6.0).unwrap();
        assert!(hr.values.iter().all(|v| (v - 60.0).abs() < 1e-9));
        let twice = BeatTrain::new((0..=160).map(|i| i as f64 * 0.5).collect()).unwrap();
        let hr: SampledSeries<f64> = compute_hr(&twice, &grid, 6.0).unwrap();
        assert!(hr.values.iter().all(|v| (v - 120.0).abs() < 1e-9));
    }

    #[test]
    fn hr_hand_example() {
        // window [0, 3] s centred at 1.5 s
        let beats = BeatTrain::new(vec![0.0, 1.0, 1.5, 2.5]).unwrap();
        let grid = TrGrid::new(1.5, 2).unwrap();
        let hr: SampledSeries<f64> = compute_hr(&beats, &grid, 3.0).unwrap();
        assert!((hr.values[1] - 72.0).abs() < 1e-12);
    }

    #[test]
    fn hr_fills_gaps_from_nearest_valid() {
        // beats only early in the recording
        let beats = BeatTrain::new(vec![0.0, 1.0, 2.0]).unwrap();
        let grid = TrGrid::new(2.0, 10).unwrap();
        let hr: SampledSeries<f64> = compute_hr(&beats, &grid, 2.0).unwrap();
        assert!(hr
            .values
            .iter()
            .all(|v| (v - 60.0).abs() < 1e-12 && *v > 0.0));
    }

    #[test]
    fn hr_rejects_bad_input() {
        assert!(BeatTrain::new(vec![0.0, 1.0, 1.0]).is_err());
        assert!(BeatTrain::new(vec![0.0, f64::NAN]).is_err());
        let lone = BeatTrain::new(vec![5.0]).unwrap();
        let grid = TrGrid::new(1.0, 4).unwrap();
        assert!(compute_hr::<f64>(&lone, &grid, 6.0).is_err());
    }
}

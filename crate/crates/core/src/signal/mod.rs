//! Conditioning of physiological and ROI signals.
//!
//! Every 1-D signal travels as a [`SampledSeries`]. The shared conditioning
//! chain is detrend, band-pass, resample and z-normalize, in that order; RV and
//! HR are derived from raw respiration and beat trains first (see [`physio`]).

mod butterworth;
mod physio;

pub use butterworth::{bandpass, butterworth_bandpass_sos, Biquad};
pub use physio::{compute_hr, compute_rv, BeatTrain, TrGrid};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Uniformly sampled 1-D signal. Times are in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSeries<T> {
    pub values: Vec<T>,
    pub dt: f64,
    pub t0: f64,
}

impl<T: Real> SampledSeries<T> {
    pub fn new(values: Vec<T>, dt: f64) -> Result<Self> {
        Self::with_origin(values, dt, 0.0)
    }

    pub fn with_origin(values: Vec<T>, dt: f64, t0: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!(
                "sampling interval must be > 0, got {dt}"
            )));
        }
        if !t0.is_finite() {
            return Err(Error::invalid("series origin must be finite"));
        }
        let series = Self { values, dt, t0 };
        series.check_finite()?;
        Ok(series)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Timestamp of sample `i`.
    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn duration(&self) -> f64 {
        self.len().saturating_sub(1) as f64 * self.dt
    }

    fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("series sample {i}"))),
            None => Ok(()),
        }
    }

    fn same_grid(&self, values: Vec<T>) -> Self {
        Self {
            values,
            dt: self.dt,
            t0: self.t0,
        }
    }
}

/// Band edges and order of the Butterworth band-pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            low_hz: 0.01,
            high_hz: 0.15,
            order: 2,
        }
    }
}

impl FilterSpec {
    /// Checks `0 < low < high < nyquist` for a series sampled every `dt` seconds.
    pub fn validate(&self, dt: f64) -> Result<()> {
        let nyquist = 0.5 / dt;
        if self.order == 0 {
            return Err(Error::invalid("filter order must be positive"));
        }
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz) {
            return Err(Error::invalid(format!(
                "band edges must satisfy 0 < low < high, got [{}, {}]",
                self.low_hz, self.high_hz
            )));
        }
        if self.high_hz >= nyquist {
            return Err(Error::invalid(format!(
                "upper band edge {} Hz is not below the Nyquist frequency {nyquist} Hz",
                self.high_hz
            )));
        }
        Ok(())
    }

    /// Reflection padding applied at each end before forward-backward filtering.
    pub fn pad_len(&self) -> usize {
        3 * (2 * self.order + 1)
    }
}

fn mean<T: Real>(xs: &[T]) -> T {
    xs.iter().copied().sum::<T>() / T::lit(xs.len() as f64)
}

/// Population standard deviation (divides by N).
pub fn population_std<T: Real>(xs: &[T]) -> T {
    let m = mean(xs);
    let ss: T = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    (ss / T::lit(xs.len() as f64)).sqrt()
}

/// Removes the least-squares line through the samples.
pub fn detrend_linear<T: Real>(x: &SampledSeries<T>) -> Result<SampledSeries<T>> {
    let n = x.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "detrend needs at least 2 samples, got {n}"
        )));
    }
    x.check_finite()?;
    // Centered abscissa keeps the normal equations diagonal.
    let center = T::lit((n - 1) as f64 / 2.0);
    let ybar = mean(&x.values);
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    for (i, &y) in x.values.iter().enumerate() {
        let u = T::lit(i as f64) - center;
        sxy += u * (y - ybar);
        sxx += u * u;
    }
    let slope = sxy / sxx;
    let out = x
        .values
        .iter()
        .enumerate()
        .map(|(i, &y)| y - ybar - slope * (T::lit(i as f64) - center))
        .collect();
    Ok(x.same_grid(out))
}

/// Number of samples produced by [`resample_linear`].
pub fn resampled_len(len: usize, dt: f64, dst_dt: f64) -> usize {
    if len == 0 {
        return 0;
    }
    let span = (len - 1) as f64 * dt / dst_dt;
    // Guard against 269.99999999999997-style rounding of exact ratios.
    (span + 1e-9).floor() as usize + 1
}

/// Linear interpolation onto `t0 + k * dst_dt`, never extrapolating past the
/// last sample.
pub fn resample_linear<T: Real>(x: &SampledSeries<T>, dst_dt: f64) -> Result<SampledSeries<T>> {
    if !(dst_dt > 0.0 && dst_dt.is_finite()) {
        return Err(Error::invalid(format!(
            "target sampling interval must be > 0, got {dst_dt}"
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "resampling needs at least 2 samples, got {n}"
        )));
    }
    x.check_finite()?;
    let ratio = dst_dt / x.dt;
    let out_len = resampled_len(n, x.dt, dst_dt);
    let mut out = Vec::with_capacity(out_len);
    for k in 0..out_len {
        let pos = k as f64 * ratio;
        let i = (pos.floor() as usize).min(n - 1);
        let frac = pos - i as f64;
        if frac <= 1e-12 || i == n - 1 {
            out.push(x.values[i]);
        } else {
            let (a, b) = (x.values[i], x.values[i + 1]);
            out.push(a + T::lit(frac) * (b - a));
        }
    }
    Ok(SampledSeries {
        values: out,
        dt: dst_dt,
        t0: x.t0,
    })
}

/// Subtracts the mean and divides by the population standard deviation.
pub fn znorm<T: Real>(x: &SampledSeries<T>) -> Result<SampledSeries<T>> {
    if x.is_empty() {
        return Err(Error::Degenerate(
            "empty series cannot be z-normalized".into(),
        ));
    }
    x.check_finite()?;
    let m = mean(&x.values);
    let sd = population_std(&x.values);
    if sd.as_f64() <= 1e-12 {
        return Err(Error::Degenerate(format!(
            "series is constant (std {:e}), cannot z-normalize",
            sd.as_f64()
        )));
    }
    Ok(x.same_grid(x.values.iter().map(|&v| (v - m) / sd).collect()))
}

/// Detrend, band-pass, resample to `dst_dt`, z-normalize. Errors carry the
/// stage name.
pub fn preprocess_chain<T: Real>(
    x: &SampledSeries<T>,
    spec: &FilterSpec,
    dst_dt: f64,
) -> Result<SampledSeries<T>> {
    let detrended = detrend_linear(x).map_err(|e| e.in_stage("detrend"))?;
    let filtered = bandpass(&detrended, spec).map_err(|e| e.in_stage("bandpass"))?;
    let resampled = resample_linear(&filtered, dst_dt).map_err(|e| e.in_stage("resample"))?;
    znorm(&resampled).map_err(|e| e.in_stage("znorm"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(values: Vec<f64>, dt: f64) -> SampledSeries<f64> {
        SampledSeries::new(values, dt).unwrap()
    }

    /// Least-squares line via the raw (uncentered) normal equations.
    fn normal_equation_residual(y: &[f64]) -> Vec<f64> {
        let n = y.len() as f64;
        let sx: f64 = (0..y.len()).map(|i| i as f64).sum();
        let sxx: f64 = (0..y.len()).map(|i| (i * i) as f64).sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = y.iter().enumerate().map(|(i, v)| i as f64 * v).sum();
        let det = n * sxx - sx * sx;
        let slope = (n * sxy - sx * sy) / det;
        let icpt = (sy * sxx - sx * sxy) / det;
        y.iter()
            .enumerate()
            .map(|(i, v)| v - icpt - slope * i as f64)
            .collect()
    }

    #[test]
    fn detrend_removes_ramp_and_constant() {
        let ramp = series((0..50).map(|i| 3.0 + 0.25 * i as f64).collect(), 0.72);
        let out = detrend_linear(&ramp).unwrap();
        assert!(out.values.iter().all(|v| v.abs() < 1e-12 * 15.0));
        let flat = series(vec![4.2; 10], 1.0);
        assert!(detrend_linear(&flat)
            .unwrap()
            .values
            .iter()
            .all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn detrend_matches_normal_equations() {
        let y: Vec<f64> = (0..200)
            .map(|i| 0.5 + 0.01 * i as f64 + (i as f64 * 0.3).sin())
            .collect();
        let got = detrend_linear(&series(y.clone(), 0.8)).unwrap();
        let want = normal_equation_residual(&y);
        for (a, b) in got.values.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn detrend_rejects_short_input() {
        assert!(detrend_linear(&series(vec![1.0], 1.0)).is_err());
    }

    #[test]
    fn resample_identity_and_lengths() {
        let x = series((0..20).map(|i| (i as f64).sqrt()).collect(), 0.72);
        assert_eq!(resample_linear(&x, 0.72).unwrap(), x);
        assert_eq!(resampled_len(1200, 0.72, 1.44), 600);
        assert_eq!(resampled_len(487, 0.8, 1.44), 271);
        assert!(resample_linear(&x, 0.0).is_err());
        assert!(resample_linear(&x, -1.0).is_err());
    }

    #[test]
    fn resample_exact_on_lines() {
        let x = series(
            (0..487).map(|i| 2.0 - 0.3 * (i as f64 * 0.8)).collect(),
            0.8,
        );
        let y = resample_linear(&x, 1.44).unwrap();
        assert_eq!(y.len(), 271);
        for (k, v) in y.values.iter().enumerate() {
            let t = k as f64 * 1.44;
            assert!((v - (2.0 - 0.3 * t)).abs() < 1e-12);
        }
    }

    #[test]
    fn znorm_basic_and_degenerate() {
        let z = znorm(&series(vec![1.0, 2.0, 3.0], 1.0)).unwrap();
        assert!(mean(&z.values).abs() < 1e-12);
        assert!((population_std(&z.values) - 1.0).abs() < 1e-12);
        assert!(matches!(
            znorm(&series(vec![5.0, 5.0, 5.0], 1.0)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn chain_output_normalized_with_expected_length() {
        let x = series(
            (0..487)
                .map(|i| {
                    let t = i as f64 * 0.8;
                    0.01 * t
                        + (2.0 * std::f64::consts::PI * 0.05 * t).sin()
                        + 0.3 * (2.0 * std::f64::consts::PI * 0.3 * t).cos()
                })
                .collect(),
            0.8,
        );
        let y = preprocess_chain(&x, &FilterSpec::default(), 1.44).unwrap();
        assert_eq!(y.len(), 271);
        assert!(mean(&y.values).abs() < 1e-9);
        assert!((population_std(&y.values) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn chain_errors_name_the_stage() {
        let x = series(vec![1.0; 100], 0.8);
        let err = preprocess_chain(&x, &FilterSpec::default(), 1.44).unwrap_err();
        assert!(err.to_string().starts_with("znorm"), "{err}");
        let short = series((0..10).map(|i| i as f64 * i as f64).collect(), 0.8);
        let err = preprocess_chain(&short, &FilterSpec::default(), 1.44).unwrap_err();
        assert!(err.to_string().starts_with("bandpass"), "{err}");
    }

    #[test]
    fn works_in_single_precision() {
        let x = SampledSeries::new(
            (0..300)
                .map(|i| ((i as f32) * 0.2).sin() + 0.01 * i as f32)
                .collect(),
            1.44,
        )
        .unwrap();
        let y = preprocess_chain(&x, &FilterSpec::default(), 1.44).unwrap();
        assert!((population_std(&y.values) - 1.0).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn detrend_is_idempotent(v in proptest::collection::vec(-100.0f64..100.0, 2..80)) {
            let once = detrend_linear(&series(v, 1.0)).unwrap();
            let twice = detrend_linear(&once).unwrap();
            for (a, b) in once.values.iter().zip(&twice.values) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn znorm_affine_invariant(
            v in proptest::collection::vec(-10.0f64..10.0, 3..60),
            a in 0.1f64..50.0,
            b in -20.0f64..20.0,
        ) {
            let x = series(v.clone(), 1.0);
            prop_assume!(population_std(&v) > 1e-3);
            let y = series(v.iter().map(|x| a * x + b).collect(), 1.0);
            let (zx, zy) = (znorm(&x).unwrap(), znorm(&y).unwrap());
            for (p, q) in zx.values.iter().zip(&zy.values) {
                prop_assert!((p - q).abs() < 1e-9);
            }
            prop_assert!(mean(&zx.values).abs() < 1e-9);
            prop_assert!((population_std(&zx.values) - 1.0).abs() < 1e-9);
        }
    }
}

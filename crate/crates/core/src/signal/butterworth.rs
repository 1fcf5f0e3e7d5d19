//! Butterworth band-pass design and zero-phase (forward-backward) filtering.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::{FilterSpec, SampledSeries};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// One second-order section, `a[0]` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }

    /// Transposed direct-form II state reached after a unit step settles.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[2] * g;
        let z1 = self.b[1] - self.a[1] * g + z2;
        [z1, z2]
    }

    /// Complex frequency response at normalized angular frequency `w` (rad/sample).
    pub fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b[0] + z1 * self.b[1] + z2 * self.b[2];
        let den = self.a[0] + z1 * self.a[1] + z2 * self.a[2];
        num / den
    }
}

/// Digital Butterworth band-pass of the given prototype order as cascaded
/// biquads (bilinear transform with pre-warped band edges).
pub fn butterworth_bandpass_sos(
    order: usize,
    low_hz: f64,
    high_hz: f64,
    fs: f64,
) -> Result<Vec<Biquad>> {
    if order == 0 {
        return Err(Error::invalid("filter order must be positive"));
    }
    let nyq = fs / 2.0;
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < nyq) {
        return Err(Error::invalid(format!(
            "band [{low_hz}, {high_hz}] Hz invalid for sampling rate {fs} Hz"
        )));
    }
    // Work at a normalized rate of 2 samples per unit time, as scipy does.
    let fs2 = 4.0;
    let warp = |f: f64| fs2 * (PI * (f / nyq) / 2.0).tan();
    let (w1, w2) = (warp(low_hz), warp(high_hz));
    let bw = w2 - w1;
    let wo2 = w1 * w2;

    let n = order as f64;
    let mut poles = Vec::with_capacity(2 * order);
    for m in (0..order).map(|i| -(n - 1.0) + 2.0 * i as f64) {
        let proto = -Complex64::from_polar(1.0, PI * m / (2.0 * n));
        let lp = proto * (bw / 2.0);
        let root = (lp * lp - wo2).sqrt();
        poles.push(lp + root);
        poles.push(lp - root);
    }
    let analog_gain = bw.powi(order as i32);
    let digital: Vec<Complex64> = poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    let denom: Complex64 = poles.iter().map(|p| fs2 - p).product();
    let gain = analog_gain * (Complex64::new(fs2.powi(order as i32), 0.0) / denom).re;

    let mut complex: Vec<Complex64> = digital.iter().copied().filter(|p| p.im > 1e-14).collect();
    let mut real: Vec<f64> = digital
        .iter()
        .filter(|p| p.im.abs() <= 1e-14)
        .map(|p| p.re)
        .collect();
    complex.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    real.sort_by(f64::total_cmp);
    if complex.len() * 2 + real.len() != 2 * order || !real.len().is_multiple_of(2) {
        return Err(Error::invalid("pole set is not closed under conjugation"));
    }

    let mut sections: Vec<Biquad> = complex
        .iter()
        .map(|p| Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -2.0 * p.re, p.norm_sqr()],
        })
        .collect();
    for pair in real.chunks(2) {
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -(pair[0] + pair[1]), pair[0] * pair[1]],
        });
    }
    for c in sections[0].b.iter_mut() {
        *c *= gain;
    }
    Ok(sections)
}

fn sosfilt<T: Real>(sections: &[(Biquad, [f64; 2])], x: &mut [T], x0: T) {
    let mut scale = x0;
    for (sec, zi) in sections {
        let (b0, b1, b2) = (T::lit(sec.b[0]), T::lit(sec.b[1]), T::lit(sec.b[2]));
        let (a1, a2) = (T::lit(sec.a[1]), T::lit(sec.a[2]));
        let mut z1 = T::lit(zi[0]) * scale;
        let mut z2 = T::lit(zi[1]) * scale;
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + z1;
            z1 = b1 * xin - a1 * y + z2;
            z2 = b2 * xin - a2 * y;
            *v = y;
        }
        scale *= T::lit(sec.dc_gain());
    }
}

/// Zero-phase Butterworth band-pass: odd-reflection padding of
/// `spec.pad_len()` samples, steady-state initial conditions, forward pass,
/// then a reversed pass.
pub fn bandpass<T: Real>(x: &SampledSeries<T>, spec: &FilterSpec) -> Result<SampledSeries<T>> {
    spec.validate(x.dt)?;
    let pad = spec.pad_len();
    let n = x.len();
    if n <= pad {
        return Err(Error::invalid(format!(
            "series of {n} samples too short for {pad}-sample reflection padding"
        )));
    }
    x.check_finite()?;
    let sos = butterworth_bandpass_sos(spec.order, spec.low_hz, spec.high_hz, 1.0 / x.dt)?;
    let sections: Vec<(Biquad, [f64; 2])> = sos.iter().map(|s| (*s, s.step_state())).collect();

    let v = &x.values;
    let two = T::lit(2.0);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| two * v[0] - v[i]));
    ext.extend_from_slice(v);
    ext.extend((n - 1 - pad..n - 1).rev().map(|i| two * v[n - 1] - v[i]));

    let first = ext[0];
    sosfilt(&sections, &mut ext, first);
    ext.reverse();
    let first = ext[0];
    sosfilt(&sections, &mut ext, first);
    ext.reverse();

    Ok(x.same_grid(ext[pad..pad + n].to_vec()))
}

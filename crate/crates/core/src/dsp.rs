//! High-pass filtering, Pearson correlation and the volume-flow similarity
//! index (VFSI).
//!
//! The high-pass is a Butterworth design realised as cascaded biquads from
//! the bilinear transform. Zero-phase filtering runs the cascade forward and
//! backward over an odd-reflected extension of the input, with each pass
//! started from the steady-state filter state for its first sample so that
//! constant inputs produce no start-up transient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A filtered signal whose RMS falls below this fraction of the input's peak
/// magnitude is treated as having no variance.
pub const FLAT_RELATIVE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub highpass_cutoff_hz: f64,
    /// Even, at least 2.
    pub filter_order: usize,
    pub zero_phase: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            highpass_cutoff_hz: 0.5,
            filter_order: 4,
            zero_phase: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self, sampling_rate_hz: f64) -> Result<()> {
        if self.filter_order < 2 || !self.filter_order.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "filter order must be even and at least 2, got {}",
                self.filter_order
            )));
        }
        if !(sampling_rate_hz.is_finite() && sampling_rate_hz > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sampling rate must be positive, got {sampling_rate_hz}"
            )));
        }
        let nyquist_hz = sampling_rate_hz / 2.0;
        if !(self.highpass_cutoff_hz > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cutoff must be positive, got {}",
                self.highpass_cutoff_hz
            )));
        }
        if self.highpass_cutoff_hz >= nyquist_hz {
            return Err(Error::CutoffAboveNyquist {
                cutoff_hz: self.highpass_cutoff_hz,
                nyquist_hz,
            });
        }
        Ok(())
    }

    /// Samples of odd-reflected padding added on each side for zero-phase runs.
    pub fn pad_len(&self) -> usize {
        3 * (self.filter_order + 1)
    }

    /// Shortest trace a processing run accepts: four cutoff periods.
    pub fn min_trace_len(&self, sampling_rate_hz: f64) -> usize {
        (4.0 * sampling_rate_hz / self.highpass_cutoff_hz).ceil() as usize
    }
}

/// One second-order section, `b0 + b1 z^-1 + b2 z^-2 / 1 + a1 z^-1 + a2 z^-2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct-form II state reached after a unit step settles.
    fn steady_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[1] * g;
        let z1 = self.b[1] - self.a[0] * g + z2;
        [z1, z2]
    }

    /// `|H(e^{jw})|` at normalised angular frequency `w` (radians per sample).
    pub fn magnitude(&self, w: f64) -> f64 {
        let (c1, s1) = (w.cos(), -w.sin());
        let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (
            self.b[0] + self.b[1] * c1 + self.b[2] * c2,
            self.b[1] * s1 + self.b[2] * s2,
        );
        let den = (1.0 + self.a[0] * c1 + self.a[1] * c2, self.a[0] * s1 + self.a[1] * s2);
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }
}

/// Butterworth high-pass of even `order`, as `order / 2` biquads, each
/// normalised to unit gain at Nyquist.
pub fn butterworth_highpass(order: usize, cutoff_hz: f64, sampling_rate_hz: f64) -> Vec<Biquad> {
    let fs2 = 2.0 * sampling_rate_hz;
    // Pre-warped analog cutoff.
    let wc = fs2 * (std::f64::consts::PI * cutoff_hz / sampling_rate_hz).tan();
    let n = order as f64;
    (1..=order / 2)
        .map(|k| {
            let theta = std::f64::consts::PI * (2.0 * k as f64 + n - 1.0) / (2.0 * n);
            // Low-pass prototype pole (unit circle, left half plane) mapped to
            // the high-pass pole wc / p.
            let (pr, pi) = (theta.cos(), theta.sin());
            let (sr, si) = (wc * pr, -wc * pi);
            // Bilinear transform z = (2fs + s) / (2fs - s).
            let (nr, ni) = (fs2 + sr, si);
            let (dr, di) = (fs2 - sr, -si);
            let d2 = dr * dr + di * di;
            let zr = (nr * dr + ni * di) / d2;
            let zi = (ni * dr - nr * di) / d2;
            let a1 = -2.0 * zr;
            let a2 = zr * zr + zi * zi;
            let gain = (1.0 - a1 + a2) / 4.0;
            Biquad {
                b: [gain, -2.0 * gain, gain],
                a: [a1, a2],
            }
        })
        .collect()
}

/// A designed high-pass ready to apply to sequences at one sampling rate.
#[derive(Debug, Clone)]
pub struct Highpass {
    sections: Vec<Biquad>,
    zi: Vec<[f64; 2]>,
    pad: usize,
    zero_phase: bool,
}

impl Highpass {
    pub fn new(sampling_rate_hz: f64, cfg: &FilterConfig) -> Result<Self> {
        cfg.validate(sampling_rate_hz)?;
        let sections = butterworth_highpass(cfg.filter_order, cfg.highpass_cutoff_hz, sampling_rate_hz);
        let mut scale = 1.0;
        let zi = sections
            .iter()
            .map(|s| {
                let [z1, z2] = s.steady_state();
                let out = [z1 * scale, z2 * scale];
                scale *= s.dc_gain();
                out
            })
            .collect();
        Ok(Self {
            sections,
            zi,
            pad: cfg.pad_len(),
            zero_phase: cfg.zero_phase,
        })
    }

    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    pub fn min_len(&self) -> usize {
        self.pad + 1
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = x.len();
        if n < self.min_len() {
            return Err(Error::TooShort {
                len: n,
                min: self.min_len(),
            });
        }
        if !self.zero_phase {
            let mut y = x.to_vec();
            self.run(&mut y);
            return Ok(y);
        }

        let pad = self.pad;
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (x[0], x[n - 1]);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        Ok(ext[pad..pad + n].to_vec())
    }

    /// In-place causal cascade, initial state scaled by the first sample.
    fn run(&self, x: &mut [f64]) {
        let x0 = x[0];
        for (s, zi) in self.sections.iter().zip(&self.zi) {
            let (mut z1, mut z2) = (zi[0] * x0, zi[1] * x0);
            let [b0, b1, b2] = s.b;
            let [a1, a2] = s.a;
            for v in x.iter_mut() {
                let input = *v;
                let y = b0 * input + z1;
                z1 = b1 * input - a1 * y + z2;
                z2 = b2 * input - a2 * y;
                *v = y;
            }
        }
    }
}

pub fn highpass(x: &[f64], sampling_rate_hz: f64, cfg: &FilterConfig) -> Result<Vec<f64>> {
    Highpass::new(sampling_rate_hz, cfg)?.apply(x)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub(crate) fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub(crate) fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// True when `filtered` carries no variance relative to the scale of `original`.
pub(crate) fn is_flat(filtered: &[f64], original: &[f64]) -> bool {
    rms(filtered) <= FLAT_RELATIVE_TOL * max_abs(original)
}

/// Sample Pearson correlation, two-pass.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::TooShort { len: x.len(), min: 2 });
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of the high-passed flow and volume waveforms. Pass
/// `prefiltered = true` when both inputs have already been high-passed.
pub fn vfsi(cbf: &[f64], cbv: &[f64], sampling_rate_hz: f64, cfg: &FilterConfig, prefiltered: bool) -> Result<f64> {
    if prefiltered {
        return pearson(cbf, cbv);
    }
    if cbf.len() != cbv.len() {
        return Err(Error::LengthMismatch {
            left: cbf.len(),
            right: cbv.len(),
        });
    }
    let hp = Highpass::new(sampling_rate_hz, cfg)?;
    let (f, v) = (hp.apply(cbf)?, hp.apply(cbv)?);
    if is_flat(&f, cbf) || is_flat(&v, cbv) {
        return Err(Error::ZeroVariance);
    }
    pearson(&f, &v)
}

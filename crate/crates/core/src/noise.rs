//! Forward noise model: subtraction of shot- and camera-noise contrast,
//! flow index from the corrected contrast, and the optical-density volume
//! proxy.
//!
//! With camera gain `g` (ADU per photoelectron) and camera noise variance
//! `σ²` (ADU²), the flow-induced contrast is
//!
//! ```text
//! K_f² = K_raw² − g/⟨I⟩ − σ²/⟨I⟩²
//! ```
//!
//! and the blood flow index is `1/K_f²`. The volume proxy is the optical
//! density change `ln(I₀/⟨I⟩)`.

use serde::{Deserialize, Serialize};

use crate::dsp::{self, FilterConfig, Highpass};
use crate::error::{Error, Result};
use crate::trace::{Trace, TraceMeta};

pub const DEFAULT_KF2_FLOOR: f64 = 1e-6;

/// Camera gain and noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// `g`, ADU per photoelectron.
    pub gain_adu_per_e: f64,
    /// `σ_cam²`, ADU².
    pub cam_var_adu2: f64,
}

impl NoiseParams {
    pub fn new(gain_adu_per_e: f64, cam_var_adu2: f64) -> Result<Self> {
        let p = Self {
            gain_adu_per_e,
            cam_var_adu2,
        };
        p.validate()?;
        Ok(p)
    }

    pub const fn zero() -> Self {
        Self {
            gain_adu_per_e: 0.0,
            cam_var_adu2: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gain", self.gain_adu_per_e), ("camera variance", self.cam_var_adu2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Flow and volume waveforms derived from one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HemoSignals {
    /// `1/K_f²`, arbitrary BFI units.
    pub cbf: Vec<f64>,
    /// ΔOD, dimensionless.
    pub cbv: Vec<f64>,
    pub cbf_hp: Vec<f64>,
    pub cbv_hp: Vec<f64>,
    pub meta: TraceMeta,
    /// Samples whose corrected contrast hit the floor.
    pub floored_count: usize,
}

/// Reciprocal of the corrected contrast, with flooring bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowIndex {
    pub values: Vec<f64>,
    pub floored_count: usize,
}

impl FlowIndex {
    pub fn floored(&self) -> bool {
        self.floored_count > 0
    }
}

/// Baseline intensity `I₀` for the optical density.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    #[default]
    TraceMean,
    Explicit(f64),
}

#[inline]
pub(crate) fn corrected_contrast(k_raw_sq: f64, intensity: f64, gain: f64, cam_var: f64) -> f64 {
    k_raw_sq - gain / intensity - cam_var / (intensity * intensity)
}

/// Per-sample `K_f²`. Over-subtraction yields non-positive values, which are
/// returned as-is.
pub fn subtract_noise(trace: &Trace, params: &NoiseParams) -> Vec<f64> {
    trace
        .points()
        .iter()
        .map(|p| corrected_contrast(p.k_raw_sq, p.mean_intensity, params.gain_adu_per_e, params.cam_var_adu2))
        .collect()
}

/// `1 / max(K_f², floor)` per sample.
pub fn cbf_from_kf2(kf2: &[f64], floor: f64) -> Result<FlowIndex> {
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "contrast floor must be positive, got {floor}"
        )));
    }
    let mut floored_count = 0;
    let values = kf2
        .iter()
        .map(|&k| {
            if k <= floor || k.is_nan() {
                floored_count += 1;
                1.0 / floor
            } else {
                1.0 / k
            }
        })
        .collect();
    Ok(FlowIndex { values, floored_count })
}

pub fn resolve_baseline(trace: &Trace, baseline: Baseline) -> Result<f64> {
    let i0 = match baseline {
        Baseline::TraceMean => dsp::mean(&trace.mean_intensity()),
        Baseline::Explicit(v) => v,
    };
    if !(i0.is_finite() && i0 > 0.0) {
        return Err(Error::NonPositiveBaseline(i0));
    }
    Ok(i0)
}

/// ΔOD per sample, `ln(I₀ / ⟨I⟩)`.
pub fn cbv_from_intensity(trace: &Trace, baseline: Baseline) -> Result<Vec<f64>> {
    let i0 = resolve_baseline(trace, baseline)?;
    Ok(trace.points().iter().map(|p| (i0 / p.mean_intensity).ln()).collect())
}

pub(crate) fn check_trace_len(trace: &Trace, filter_cfg: &FilterConfig) -> Result<()> {
    let min = filter_cfg.min_trace_len(trace.sampling_rate_hz());
    if trace.len() < min {
        return Err(Error::TooShort { len: trace.len(), min });
    }
    Ok(())
}

/// Noise subtraction, flow index, volume proxy and their high-passed forms.
pub fn derive_hemo(
    trace: &Trace,
    params: &NoiseParams,
    filter_cfg: &FilterConfig,
    baseline: Baseline,
    kf2_floor: f64,
) -> Result<HemoSignals> {
    params.validate()?;
    check_trace_len(trace, filter_cfg)?;
    let hp = Highpass::new(trace.sampling_rate_hz(), filter_cfg)?;
    let flow = cbf_from_kf2(&subtract_noise(trace, params), kf2_floor)?;
    let cbv = cbv_from_intensity(trace, baseline)?;
    Ok(HemoSignals {
        cbf_hp: hp.apply(&flow.values)?,
        cbv_hp: hp.apply(&cbv)?,
        cbf: flow.values,
        cbv,
        meta: trace.meta().clone(),
        floored_count: flow.floored_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_point(k: f64, i: f64) -> Trace {
        Trace::from_samples(1.0, &[k], &[i], "p").unwrap()
    }

    #[test]
    fn subtraction_arithmetic() {
        let p = NoiseParams::new(2.0, 100.0).unwrap();
        let kf = subtract_noise(&one_point(0.10, 100.0), &p)[0];
        assert!((kf - 0.07).abs() <= 1e-12 * 0.07);
        let over = subtract_noise(&one_point(0.02, 100.0), &p)[0];
        assert!((over + 0.01).abs() <= 1e-12 * 0.01);
        assert_eq!(subtract_noise(&one_point(0.123, 7.0), &NoiseParams::zero())[0], 0.123);
    }

    #[test]
    fn reciprocal_with_floor() {
        let f = cbf_from_kf2(&[0.05, 0.04], 1e-6).unwrap();
        assert_eq!(f.values, vec![20.0, 25.0]);
        assert!(!f.floored());
        let f = cbf_from_kf2(&[-0.01], 1e-6).unwrap();
        assert!((f.values[0] - 1e6).abs() < 1e-6);
        assert_eq!(f.floored_count, 1);
        assert!(cbf_from_kf2(&[0.1], 0.0).is_err());
    }

    #[test]
    fn optical_density() {
        let t = Trace::from_samples(1.0, &[0.1; 3], &[50.0, 50.0 / std::f64::consts::E, 50.0], "x").unwrap();
        let od = cbv_from_intensity(&t, Baseline::Explicit(50.0)).unwrap();
        assert_eq!(od[0], 0.0);
        assert!((od[1] - 1.0).abs() < 1e-15);
        assert!(matches!(
            cbv_from_intensity(&t, Baseline::Explicit(0.0)),
            Err(Error::NonPositiveBaseline(_))
        ));
    }

    #[test]
    fn constant_trace_has_flat_highpass() {
        let n = 600;
        let t = Trace::from_samples(60.0, &vec![0.08; n], &vec![120.0; n], "c").unwrap();
        let h = derive_hemo(
            &t,
            &NoiseParams::new(2.0, 10.0).unwrap(),
            &FilterConfig::default(),
            Baseline::TraceMean,
            DEFAULT_KF2_FLOOR,
        )
        .unwrap();
        let scale = h.cbf[0];
        assert!(h.cbf_hp.iter().all(|v| v.abs() < 1e-9 * scale));
        assert!(h.cbv_hp.iter().all(|v| v.abs() < 1e-9));
        assert_eq!(h.cbf.len(), n);
    }

    #[test]
    fn short_trace_rejected() {
        let t = Trace::from_samples(60.0, &[0.1; 100], &[100.0; 100], "s").unwrap();
        let err = derive_hemo(
            &t,
            &NoiseParams::zero(),
            &FilterConfig::default(),
            Baseline::TraceMean,
            DEFAULT_KF2_FLOOR,
        )
        .unwrap_err();
        assert!(matches!(err, Error::TooShort { len: 100, min: 480 }));
    }

    #[test]
    fn params_reject_negatives() {
        assert!(NoiseParams::new(-1.0, 0.0).is_err());
        assert!(NoiseParams::new(1.0, f64::NAN).is_err());
    }
}

//! Study-level metrics: flow fidelity, rank correlation, the hinge threshold
//! fit and the signal-sweep study.
//!
//! The threshold fit regresses VFSI² on `x = log10(signal level)` with a
//! continuous two-segment line
//!
//! ```text
//! y = β₀ + β_L·min(x − c, 0) + β_R·max(x − c, 0)
//! ```
//!
//! For each candidate breakpoint `c` (50 subdivisions of every gap between
//! adjacent distinct levels) the three coefficients are found by least
//! squares; the `c` with the smallest SSE wins. The threshold is `10^c`.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{calibrate, CalibConfig, LossSurface};
use crate::dsp::{self, FilterConfig, Highpass};
use crate::error::{Error, Result};
use crate::noise::NoiseParams;
use crate::synth::SynthDataset;

pub const MIN_FIT_POINTS: usize = 6;
pub const MIN_LEVEL_RATIO: f64 = 4.0;
pub const BREAKPOINT_SUBDIVISIONS: usize = 50;
/// Responses spanning less than this are treated as flat.
pub const FLAT_RESPONSE_RANGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepLabel {
    PreOptimization,
    PostOptimization,
}

impl SweepLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepLabel::PreOptimization => "pre-optimization",
            SweepLabel::PostOptimization => "post-optimization",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub signal_level_e_per_px: f64,
    pub vfsi_sq: f64,
    pub fidelity: f64,
    pub label: SweepLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    pub threshold_e_per_px: f64,
    pub breakpoint_log10: f64,
    pub left_slope: f64,
    pub right_slope: f64,
    /// Fitted value at the breakpoint.
    pub breakpoint_value: f64,
    /// Intercepts of the two segment lines at `log10(level) = 0`.
    pub left_intercept: f64,
    pub right_intercept: f64,
    pub sse: f64,
    pub left_slope_se: f64,
    pub slope_diff_se: f64,
    pub n_points: usize,
    /// Slope change exceeds twice its standard error.
    pub reliable: bool,
}

impl ThresholdFit {
    pub fn predict(&self, signal_level_e_per_px: f64) -> f64 {
        let d = signal_level_e_per_px.log10() - self.breakpoint_log10;
        self.breakpoint_value + self.left_slope * d.min(0.0) + self.right_slope * d.max(0.0)
    }
}

/// Pearson correlation of the high-passed flow against a high-passed reference.
pub fn fidelity(cbf: &[f64], reference: &[f64], sampling_rate_hz: f64, filter_cfg: &FilterConfig) -> Result<f64> {
    let hp = Highpass::new(sampling_rate_hz, filter_cfg)?;
    fidelity_with(&hp, cbf, reference)
}

fn fidelity_with(hp: &Highpass, cbf: &[f64], reference: &[f64]) -> Result<f64> {
    if cbf.len() != reference.len() {
        return Err(Error::LengthMismatch {
            left: cbf.len(),
            right: reference.len(),
        });
    }
    let (a, b) = (hp.apply(cbf)?, hp.apply(reference)?);
    if dsp::is_flat(&a, cbf) || dsp::is_flat(&b, reference) {
        return Err(Error::ZeroVariance);
    }
    dsp::pearson(&a, &b)
}

/// 1-based ranks with ties sharing their mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    dsp::pearson(&ranks(x), &ranks(y))
}

struct Candidate {
    c: f64,
    beta: Vector3<f64>,
    sse: f64,
    inv: Matrix3<f64>,
}

fn fit_at(x: &[f64], y: &[f64], c: f64) -> Option<Candidate> {
    let row = |xi: f64| Vector3::new(1.0, (xi - c).min(0.0), (xi - c).max(0.0));
    let mut xtx = Matrix3::zeros();
    let mut xty = Vector3::zeros();
    for (&xi, &yi) in x.iter().zip(y) {
        let r = row(xi);
        xtx += r * r.transpose();
        xty += r * yi;
    }
    let chol = xtx.cholesky()?;
    let beta = chol.solve(&xty);
    let sse = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| (yi - row(xi).dot(&beta)).powi(2))
        .sum();
    Some(Candidate {
        c,
        beta,
        sse,
        inv: chol.inverse(),
    })
}

/// Continuous two-segment fit of VFSI² against log10 signal level.
pub fn fit_threshold(points: &[SweepPoint]) -> Result<ThresholdFit> {
    let n = points.len();
    if n < MIN_FIT_POINTS {
        return Err(Error::InsufficientPoints {
            needed: MIN_FIT_POINTS,
            got: n,
        });
    }
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.signal_level_e_per_px, p.vfsi_sq)).collect();
    if let Some(p) = pts.iter().find(|p| !(p.0.is_finite() && p.0 > 0.0 && p.1.is_finite())) {
        return Err(Error::InvalidConfig(format!(
            "sweep point ({}, {}) is not a positive level with a finite response",
            p.0, p.1
        )));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let ratio = pts[n - 1].0 / pts[0].0;
    if ratio < MIN_LEVEL_RATIO {
        return Err(Error::DegenerateSpread {
            ratio,
            needed: MIN_LEVEL_RATIO,
        });
    }
    let x: Vec<f64> = pts.iter().map(|p| p.0.log10()).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let mut levels = x.clone();
    levels.dedup();
    if levels.len() < 3 {
        return Err(Error::TooFewLevels {
            needed: 3,
            got: levels.len(),
        });
    }

    let last = levels[levels.len() - 1];
    let mut best: Option<Candidate> = None;
    for w in levels.windows(2) {
        for k in 1..=BREAKPOINT_SUBDIVISIONS {
            let c = w[0] + (w[1] - w[0]) * k as f64 / BREAKPOINT_SUBDIVISIONS as f64;
            if c >= last {
                continue;
            }
            if let Some(cand) = fit_at(&x, &y, c) {
                if best.as_ref().is_none_or(|b| cand.sse < b.sse) {
                    best = Some(cand);
                }
            }
        }
    }
    let Candidate { c, beta, sse, inv } = best.ok_or(Error::TooFewLevels {
        needed: 3,
        got: levels.len(),
    })?;

    let s2 = sse / (n - 4) as f64;
    let cov = inv * s2;
    let slope_diff = beta[2] - beta[1];
    let slope_diff_se = (cov[(1, 1)] + cov[(2, 2)] - 2.0 * cov[(1, 2)]).max(0.0).sqrt();
    let (y_min, y_max) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let flat = y_max - y_min <= FLAT_RESPONSE_RANGE;
    Ok(ThresholdFit {
        threshold_e_per_px: 10f64.powf(c),
        breakpoint_log10: c,
        left_slope: beta[1],
        right_slope: beta[2],
        breakpoint_value: beta[0],
        left_intercept: beta[0] - beta[1] * c,
        right_intercept: beta[0] - beta[2] * c,
        sse,
        left_slope_se: cov[(1, 1)].max(0.0).sqrt(),
        slope_diff_se,
        n_points: n,
        reliable: !flat && slope_diff != 0.0 && slope_diff.abs() > 2.0 * slope_diff_se,
    })
}

/// Initial parameters for each dataset in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorsPolicy {
    /// The dataset's miscalibrated prior.
    #[default]
    Informed,
    /// Start from `g = σ² = 0`.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub calib: CalibConfig,
    pub filter: FilterConfig,
    pub priors: PriorsPolicy,
}

/// Per-dataset numbers from a successful study run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOutcome {
    pub index: usize,
    pub signal_level_e_per_px: f64,
    pub rng_seed: u64,
    pub vfsi_pre: f64,
    pub vfsi_post: f64,
    pub fidelity_pre: f64,
    pub fidelity_post: f64,
    pub params_init: NoiseParams,
    pub params_opt: NoiseParams,
    pub no_improvement: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFailure {
    pub index: usize,
    pub signal_level_e_per_px: f64,
    pub rng_seed: u64,
    pub error: String,
}

#[derive(Debug)]
pub struct SweepStudy {
    pub pre: Vec<SweepPoint>,
    pub post: Vec<SweepPoint>,
    pub outcomes: Vec<DatasetOutcome>,
    pub failures: Vec<DatasetFailure>,
    pub pre_fit: Result<ThresholdFit>,
    pub post_fit: Result<ThresholdFit>,
}

impl SweepStudy {
    pub fn n_datasets(&self) -> usize {
        self.outcomes.len() + self.failures.len()
    }

    pub fn success_fraction(&self) -> f64 {
        match self.n_datasets() {
            0 => 0.0,
            n => self.outcomes.len() as f64 / n as f64,
        }
    }
}

fn study_one(index: usize, d: &SynthDataset, cfg: &StudyConfig) -> Result<DatasetOutcome> {
    let priors = match cfg.priors {
        PriorsPolicy::Informed => d.prior_params,
        PriorsPolicy::Zero => NoiseParams::zero(),
    };
    let fs = d.trace.sampling_rate_hz();
    let hp = Highpass::new(fs, &cfg.filter)?;
    let surface = LossSurface::new(&d.trace, &cfg.filter, cfg.calib.kf2_floor)?;
    let vfsi_pre = surface.vfsi(&priors)?;
    let cbf_pre = crate::noise::cbf_from_kf2(&crate::noise::subtract_noise(&d.trace, &priors), cfg.calib.kf2_floor)?;
    let fidelity_pre = fidelity_with(&hp, &cbf_pre.values, &d.truth_flow)?;
    let r = calibrate(&d.trace, &priors, &cfg.calib, &cfg.filter)?;
    let fidelity_post = fidelity_with(&hp, &r.cbf_opt, &d.truth_flow)?;
    Ok(DatasetOutcome {
        index,
        signal_level_e_per_px: d.signal_level_e_per_px(),
        rng_seed: d.spec.rng_seed,
        vfsi_pre,
        vfsi_post: r.vfsi_final,
        fidelity_pre,
        fidelity_post,
        params_init: priors,
        params_opt: r.params_opt,
        no_improvement: r.no_improvement,
    })
}

/// Pre- and post-calibration metrics for every dataset, plus threshold fits
/// for both populations. A failing dataset is recorded and skipped. Work is
/// spread over the current rayon pool; results come back in input order.
pub fn run_sweep_study(datasets: &[SynthDataset], cfg: &StudyConfig) -> SweepStudy {
    let results: Vec<Result<DatasetOutcome>> = datasets
        .par_iter()
        .enumerate()
        .map(|(i, d)| study_one(i, d, cfg))
        .collect();
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => failures.push(DatasetFailure {
                index: i,
                signal_level_e_per_px: datasets[i].signal_level_e_per_px(),
                rng_seed: datasets[i].spec.rng_seed,
                error: e.to_string(),
            }),
        }
    }
    let point = |o: &DatasetOutcome, label| match label {
        SweepLabel::PreOptimization => SweepPoint {
            signal_level_e_per_px: o.signal_level_e_per_px,
            vfsi_sq: o.vfsi_pre * o.vfsi_pre,
            fidelity: o.fidelity_pre,
            label,
        },
        SweepLabel::PostOptimization => SweepPoint {
            signal_level_e_per_px: o.signal_level_e_per_px,
            vfsi_sq: o.vfsi_post * o.vfsi_post,
            fidelity: o.fidelity_post,
            label,
        },
    };
    let pre: Vec<SweepPoint> = outcomes.iter().map(|o| point(o, SweepLabel::PreOptimization)).collect();
    let post: Vec<SweepPoint> = outcomes
        .iter()
        .map(|o| point(o, SweepLabel::PostOptimization))
        .collect();
    SweepStudy {
        pre_fit: fit_threshold(&pre),
        post_fit: fit_threshold(&post),
        pre,
        post,
        outcomes,
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(level: f64, y: f64) -> SweepPoint {
        SweepPoint {
            signal_level_e_per_px: level,
            vfsi_sq: y,
            fidelity: 1.0,
            label: SweepLabel::PreOptimization,
        }
    }

    fn hinge_points(n: usize) -> Vec<SweepPoint> {
        let c = 50f64.log10();
        (0..n)
            .map(|i| {
                let x = 1.0 + 2.0 * i as f64 / (n - 1) as f64;
                let y = 0.05 - 0.8 * (x - c).min(0.0) + 0.01 * (x - c).max(0.0);
                pt(10f64.powf(x), y)
            })
            .collect()
    }

    #[test]
    fn exact_hinge_recovered() {
        let f = fit_threshold(&hinge_points(21)).unwrap();
        assert!((f.threshold_e_per_px / 50.0 - 1.0).abs() < 0.01, "{f:?}");
        assert!(f.reliable);
        assert!(f.left_slope < 0.0);
    }

    #[test]
    fn flat_response_is_unreliable() {
        let pts: Vec<SweepPoint> = (0..8).map(|i| pt(10.0 * 1.5f64.powi(i), 0.3)).collect();
        let f = fit_threshold(&pts).unwrap();
        assert!(!f.reliable);
    }

    #[test]
    fn fit_preconditions() {
        let few: Vec<SweepPoint> = (0..5).map(|i| pt(10.0 * 2f64.powi(i), 0.1)).collect();
        assert!(matches!(
            fit_threshold(&few),
            Err(Error::InsufficientPoints { needed: 6, got: 5 })
        ));
        let narrow: Vec<SweepPoint> = (0..8).map(|i| pt(10.0 + i as f64, 0.1)).collect();
        assert!(matches!(fit_threshold(&narrow), Err(Error::DegenerateSpread { .. })));
        let two: Vec<SweepPoint> = (0..8).map(|i| pt(if i % 2 == 0 { 10.0 } else { 100.0 }, 0.1)).collect();
        assert!(matches!(fit_threshold(&two), Err(Error::TooFewLevels { .. })));
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fidelity_identity_and_errors() {
        let x: Vec<f64> = (0..600).map(|i| (i as f64 * 0.11).sin() + 3.0).collect();
        let cfg = FilterConfig::default();
        assert!((fidelity(&x, &x, 60.0, &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            fidelity(&x, &x[..500], 60.0, &cfg),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            fidelity(&x, &[2.0; 600], 60.0, &cfg),
            Err(Error::ZeroVariance)
        ));
    }
}

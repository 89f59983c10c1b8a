//! Adaptive refinement of the noise parameters by minimising VFSI².
//!
//! Adam runs on scaled coordinates `u = g / S_g`, `v = σ² / S_σ` with
//! `S_g = mean(K_raw²)·mean(⟨I⟩)` and `S_σ = mean(K_raw²)·mean(⟨I⟩)²`, so a
//! unit step in either coordinate moves `K²` by about `mean(K_raw²)`.
//!
//! The analytic gradient uses the linearity of the high-pass:
//!
//! ```text
//! ∂L/∂a  = 2ρ·(b̃/(‖ã‖‖b̃‖) − ρ·ã/‖ã‖²)        a = HP(CBF), b = HP(ΔOD), ~ = centred
//! ∂L/∂g  = ⟨∂L/∂a, HP(1/(K_f²·⟨I⟩))⟩
//! ∂L/∂σ² = ⟨∂L/∂a, HP(1/(K_f²·⟨I⟩²))⟩
//! ```
//!
//! Samples clamped to the contrast floor have zero derivative.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, FilterConfig, Highpass};
use crate::error::{Error, Result};
use crate::noise::{self, corrected_contrast, Baseline, NoiseParams, DEFAULT_KF2_FLOOR};
use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    #[default]
    Analytic,
    CentralFiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub max_iterations: usize,
    /// In scaled-parameter units.
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub nonneg_projection: bool,
    pub gradient_mode: GradientMode,
    /// Central-difference step as a fraction of the parameter scale.
    pub fd_rel_step: f64,
    /// Stop once consecutive losses differ by less than this; 0 runs every
    /// iteration.
    pub convergence_tol: f64,
    pub kf2_floor: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            nonneg_projection: true,
            gradient_mode: GradientMode::Analytic,
            fd_rel_step: 1e-4,
            convergence_tol: 0.0,
            kf2_floor: DEFAULT_KF2_FLOOR,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.adam_epsilon));
        }
        if !(self.fd_rel_step > 0.0 && self.fd_rel_step.is_finite()) {
            return bad(format!("fd_rel_step must be positive, got {}", self.fd_rel_step));
        }
        if !(self.convergence_tol >= 0.0) {
            return bad(format!(
                "convergence_tol must be non-negative, got {}",
                self.convergence_tol
            ));
        }
        if !(self.kf2_floor > 0.0 && self.kf2_floor.is_finite()) {
            return bad(format!("kf2_floor must be positive, got {}", self.kf2_floor));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Parameters of the best iterate.
    pub params_opt: NoiseParams,
    pub params_init: NoiseParams,
    /// VFSI² at every evaluated iterate; entry 0 is the prior.
    pub loss_history: Vec<f64>,
    pub vfsi_init: f64,
    /// VFSI at `params_opt`; its square is the minimum of `loss_history`.
    pub vfsi_final: f64,
    pub cbf_opt: Vec<f64>,
    pub iterations_run: usize,
    pub best_iteration: usize,
    /// Fraction of samples clamped to the contrast floor at `params_opt`.
    pub floored_fraction: f64,
    /// Set when no iterate beat the prior; `params_opt` is then the prior.
    pub no_improvement: bool,
    /// Analytic evaluations replaced by finite differences because a sample
    /// sat exactly on the floor.
    pub fd_fallbacks: usize,
    pub gradient_mode: GradientMode,
}

/// Loss surface from exhaustive grid evaluation. `surface[i][j]` is the loss
/// at `(gains[i], cam_vars[j])`; `NaN` marks cells where every sample sat on
/// the floor and the loss is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub gain_best: f64,
    pub cam_var_best: f64,
    pub loss_best: f64,
    pub gains: Vec<f64>,
    pub cam_vars: Vec<f64>,
    pub surface: Vec<Vec<f64>>,
}

/// Loss value with the pieces the caller may need.
#[derive(Debug, Clone)]
struct Eval {
    vfsi: f64,
    cbf: Vec<f64>,
    floored: usize,
    grad: Option<[f64; 2]>,
}

/// Precomputed, parameter-independent state for one trace.
#[derive(Debug, Clone)]
pub struct LossSurface {
    hp: Highpass,
    k_raw_sq: Vec<f64>,
    intensity: Vec<f64>,
    cbv_hp_centred: Vec<f64>,
    cbv_norm: f64,
    floor: f64,
    scale: [f64; 2],
}

impl LossSurface {
    pub fn new(trace: &Trace, filter_cfg: &FilterConfig, kf2_floor: f64) -> Result<Self> {
        noise::check_trace_len(trace, filter_cfg)?;
        if !(kf2_floor > 0.0 && kf2_floor.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "kf2_floor must be positive, got {kf2_floor}"
            )));
        }
        let hp = Highpass::new(trace.sampling_rate_hz(), filter_cfg)?;
        let cbv = noise::cbv_from_intensity(trace, Baseline::TraceMean)?;
        let cbv_hp = hp.apply(&cbv)?;
        if dsp::is_flat(&cbv_hp, &cbv) {
            return Err(Error::ZeroVariance);
        }
        let m = dsp::mean(&cbv_hp);
        let cbv_hp_centred: Vec<f64> = cbv_hp.iter().map(|v| v - m).collect();
        let cbv_norm = cbv_hp_centred.iter().map(|v| v * v).sum::<f64>().sqrt();
        let k_raw_sq = trace.k_raw_sq();
        let intensity = trace.mean_intensity();
        let (mk, mi) = (dsp::mean(&k_raw_sq), dsp::mean(&intensity));
        Ok(Self {
            hp,
            k_raw_sq,
            intensity,
            cbv_hp_centred,
            cbv_norm,
            floor: kf2_floor,
            scale: [mk * mi, mk * mi * mi],
        })
    }

    /// `(S_g, S_σ)`.
    pub fn scale(&self) -> [f64; 2] {
        self.scale
    }

    pub fn loss(&self, params: &NoiseParams) -> Result<f64> {
        let r = self.evaluate(params.gain_adu_per_e, params.cam_var_adu2, false)?;
        Ok(r.vfsi * r.vfsi)
    }

    pub fn vfsi(&self, params: &NoiseParams) -> Result<f64> {
        Ok(self.evaluate(params.gain_adu_per_e, params.cam_var_adu2, false)?.vfsi)
    }

    /// Gradient with respect to raw `(g, σ²)`, plus whether the analytic path
    /// had to fall back to finite differences.
    pub fn gradient(&self, params: &NoiseParams, mode: GradientMode, fd_rel_step: f64) -> Result<([f64; 2], bool)> {
        let (g, s) = (params.gain_adu_per_e, params.cam_var_adu2);
        match mode {
            GradientMode::Analytic => {
                let r = self.evaluate(g, s, true)?;
                match r.grad {
                    Some(grad) => Ok((grad, false)),
                    None => Ok((self.fd_gradient(g, s, fd_rel_step)?, true)),
                }
            }
            GradientMode::CentralFiniteDifference => Ok((self.fd_gradient(g, s, fd_rel_step)?, false)),
        }
    }

    fn fd_gradient(&self, g: f64, s: f64, rel_step: f64) -> Result<[f64; 2]> {
        let l = |g: f64, s: f64| -> Result<f64> {
            let v = self.evaluate(g, s, false)?.vfsi;
            Ok(v * v)
        };
        let hg = rel_step * self.scale[0];
        let hs = rel_step * self.scale[1];
        Ok([
            (l(g + hg, s)? - l(g - hg, s)?) / (2.0 * hg),
            (l(g, s + hs)? - l(g, s - hs)?) / (2.0 * hs),
        ])
    }

    fn evaluate(&self, g: f64, s: f64, with_grad: bool) -> Result<Eval> {
        let n = self.k_raw_sq.len();
        let floor = self.floor;
        let mut cbf = Vec::with_capacity(n);
        let mut floored = 0;
        let mut on_boundary = false;
        for (&k, &i) in self.k_raw_sq.iter().zip(&self.intensity) {
            let kf = corrected_contrast(k, i, g, s);
            if kf == floor {
                on_boundary = true;
            }
            if kf > floor {
                cbf.push(1.0 / kf);
            } else {
                floored += 1;
                cbf.push(1.0 / floor);
            }
        }
        let a = self.hp.apply(&cbf)?;
        if dsp::is_flat(&a, &cbf) {
            return Err(Error::ZeroVariance);
        }
        let ma = dsp::mean(&a);
        let ac: Vec<f64> = a.iter().map(|v| v - ma).collect();
        let (mut sab, mut saa) = (0.0, 0.0);
        for (x, y) in ac.iter().zip(&self.cbv_hp_centred) {
            sab += x * y;
            saa += x * x;
        }
        let na = saa.sqrt();
        let nb = self.cbv_norm;
        let rho = (sab / (na * nb)).clamp(-1.0, 1.0);

        let grad = if with_grad && !on_boundary {
            let w: Vec<f64> = ac
                .iter()
                .zip(&self.cbv_hp_centred)
                .map(|(x, y)| 2.0 * rho * (y / (na * nb) - rho * x / saa))
                .collect();
            let mut dg = Vec::with_capacity(n);
            let mut ds = Vec::with_capacity(n);
            for (&k, &i) in self.k_raw_sq.iter().zip(&self.intensity) {
                let kf = corrected_contrast(k, i, g, s);
                if kf > floor {
                    let d = 1.0 / (kf * kf * i);
                    dg.push(d);
                    ds.push(d / i);
                } else {
                    dg.push(0.0);
                    ds.push(0.0);
                }
            }
            let dot = |u: &[f64]| u.iter().zip(&w).map(|(p, q)| p * q).sum::<f64>();
            Some([dot(&self.hp.apply(&dg)?), dot(&self.hp.apply(&ds)?)])
        } else {
            None
        };
        Ok(Eval {
            vfsi: rho,
            cbf,
            floored,
            grad,
        })
    }
}

/// VFSI² at `params`.
pub fn loss(trace: &Trace, params: &NoiseParams, filter_cfg: &FilterConfig, kf2_floor: f64) -> Result<f64> {
    params.validate()?;
    LossSurface::new(trace, filter_cfg, kf2_floor)?.loss(params)
}

/// `(∂L/∂g, ∂L/∂σ²)` in raw parameter units.
pub fn loss_gradient(
    trace: &Trace,
    params: &NoiseParams,
    filter_cfg: &FilterConfig,
    kf2_floor: f64,
    mode: GradientMode,
    fd_rel_step: f64,
) -> Result<(f64, f64)> {
    let surface = LossSurface::new(trace, filter_cfg, kf2_floor)?;
    let ([dg, ds], _) = surface.gradient(params, mode, fd_rel_step)?;
    Ok((dg, ds))
}

pub fn calibrate(
    trace: &Trace,
    priors: &NoiseParams,
    cfg: &CalibConfig,
    filter_cfg: &FilterConfig,
) -> Result<CalibrationResult> {
    calibrate_observed(trace, priors, cfg, filter_cfg, |_, _, _| {})
}

/// [`calibrate`], calling `observe(iteration, params, loss)` at every
/// evaluated iterate.
pub fn calibrate_observed(
    trace: &Trace,
    priors: &NoiseParams,
    cfg: &CalibConfig,
    filter_cfg: &FilterConfig,
    mut observe: impl FnMut(usize, &NoiseParams, f64),
) -> Result<CalibrationResult> {
    cfg.validate()?;
    priors.validate()?;
    let surface = LossSurface::new(trace, filter_cfg, cfg.kf2_floor)?;
    let [sg, ss] = surface.scale();
    let mut x = [priors.gain_adu_per_e / sg, priors.cam_var_adu2 / ss];
    let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let (mut b1t, mut b2t) = (1.0, 1.0);

    let mut history = Vec::with_capacity(cfg.max_iterations);
    let mut best: Option<(usize, f64, [f64; 2], Eval)> = None;
    let mut fd_fallbacks = 0;
    let mut vfsi_init = 0.0;

    for it in 0..cfg.max_iterations {
        let (g, s) = (x[0] * sg, x[1] * ss);
        let analytic = cfg.gradient_mode == GradientMode::Analytic;
        let mut eval = surface.evaluate(g, s, analytic)?;
        let l = eval.vfsi * eval.vfsi;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                gain: g,
                cam_var: s,
            });
        }
        let raw_grad = match eval.grad.take() {
            Some(grad) => grad,
            None => {
                if analytic {
                    fd_fallbacks += 1;
                }
                surface.fd_gradient(g, s, cfg.fd_rel_step)?
            }
        };
        if it == 0 {
            vfsi_init = eval.vfsi;
        }
        observe(
            it,
            &NoiseParams {
                gain_adu_per_e: g,
                cam_var_adu2: s,
            },
            l,
        );
        let prev = history.last().copied();
        history.push(l);
        if best.as_ref().is_none_or(|b| l < b.1) {
            best = Some((it, l, [g, s], eval));
        }
        if let Some(p) = prev {
            if cfg.convergence_tol > 0.0 && (p - l).abs() < cfg.convergence_tol {
                break;
            }
        }
        if it + 1 == cfg.max_iterations {
            break;
        }

        let grad = [raw_grad[0] * sg, raw_grad[1] * ss];
        b1t *= b1;
        b2t *= b2;
        for j in 0..2 {
            m[j] = b1 * m[j] + (1.0 - b1) * grad[j];
            v[j] = b2 * v[j] + (1.0 - b2) * grad[j] * grad[j];
            let mh = m[j] / (1.0 - b1t);
            let vh = v[j] / (1.0 - b2t);
            x[j] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_epsilon);
            if cfg.nonneg_projection {
                x[j] = x[j].max(0.0);
            }
        }
    }

    let (best_iteration, _, [g, s], eval) = best.expect("at least one iteration runs");
    let n = eval.cbf.len();
    Ok(CalibrationResult {
        params_opt: NoiseParams {
            gain_adu_per_e: g,
            cam_var_adu2: s,
        },
        params_init: *priors,
        vfsi_init,
        vfsi_final: eval.vfsi,
        iterations_run: history.len(),
        loss_history: history,
        best_iteration,
        floored_fraction: eval.floored as f64 / n as f64,
        no_improvement: best_iteration == 0,
        cbf_opt: eval.cbf,
        fd_fallbacks,
        gradient_mode: cfg.gradient_mode,
    })
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// Brute-force loss over an `n × n` grid of `(g, σ²)`. Ties keep the first
/// cell in row-major order.
pub fn grid_oracle(
    trace: &Trace,
    gain_range: (f64, f64),
    cam_var_range: (f64, f64),
    n: usize,
    filter_cfg: &FilterConfig,
    kf2_floor: f64,
) -> Result<GridResult> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "grid needs at least 2 points per axis, got {n}"
        )));
    }
    for (lo, hi) in [gain_range, cam_var_range] {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidConfig(format!("invalid grid range [{lo}, {hi}]")));
        }
    }
    let surface = LossSurface::new(trace, filter_cfg, kf2_floor)?;
    let gains = linspace(gain_range.0, gain_range.1, n);
    let cam_vars = linspace(cam_var_range.0, cam_var_range.1, n);
    let rows: Vec<Vec<f64>> = gains
        .par_iter()
        .map(|&g| {
            cam_vars
                .iter()
                .map(|&s| match surface.evaluate(g, s, false) {
                    Ok(e) => Ok(e.vfsi * e.vfsi),
                    Err(Error::ZeroVariance) => Ok(f64::NAN),
                    Err(e) => Err(e),
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let mut best: Option<(usize, usize, f64)> = None;
    for (i, row) in rows.iter().enumerate() {
        for (j, &l) in row.iter().enumerate() {
            if !l.is_nan() && best.is_none_or(|b| l < b.2) {
                best = Some((i, j, l));
            }
        }
    }
    let (i, j, loss_best) = best.ok_or(Error::ZeroVariance)?;
    Ok(GridResult {
        gain_best: gains[i],
        cam_var_best: cam_vars[j],
        loss_best,
        gains,
        cam_vars,
        surface: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_trace() -> Trace {
        let fs = 60.0;
        let n = 1200;
        let mut k = Vec::with_capacity(n);
        let mut i = Vec::with_capacity(n);
        for j in 0..n {
            let t = j as f64 / fs;
            let ph = 2.0 * std::f64::consts::PI * 1.1 * t;
            let intensity = 100.0 * (-0.1 * (ph + 0.7).sin()).exp();
            let kf = 0.005 / (1.0 + 0.15 * ph.sin());
            k.push(kf + 2.0 / intensity + 9.0 / (intensity * intensity));
            i.push(intensity);
        }
        Trace::from_samples(fs, &k, &i, "toy").unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(CalibConfig::default().validate().is_ok());
        let bad = CalibConfig {
            adam_beta1: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = CalibConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn analytic_matches_fd_on_toy() {
        let t = toy_trace();
        let p = NoiseParams::new(1.6, 9.0).unwrap();
        let cfg = FilterConfig::default();
        let a = loss_gradient(&t, &p, &cfg, 1e-6, GradientMode::Analytic, 1e-5).unwrap();
        let f = loss_gradient(&t, &p, &cfg, 1e-6, GradientMode::CentralFiniteDifference, 1e-5).unwrap();
        assert!((a.0 - f.0).abs() <= 1e-6 * a.0.abs().max(f.0.abs()), "{a:?} {f:?}");
        assert!((a.1 - f.1).abs() <= 1e-6 * a.1.abs().max(f.1.abs()), "{a:?} {f:?}");
    }

    #[test]
    fn calibrate_reduces_loss_and_keeps_invariants() {
        let t = toy_trace();
        let prior = NoiseParams::new(1.6, 9.0).unwrap();
        let r = calibrate(&t, &prior, &CalibConfig::default(), &FilterConfig::default()).unwrap();
        assert_eq!(r.loss_history.len(), r.iterations_run);
        let min = r.loss_history.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((r.vfsi_final * r.vfsi_final - min).abs() < 1e-12);
        assert!(r.vfsi_final.abs() < r.vfsi_init.abs());
        assert!(!r.no_improvement);
        assert!(r.params_opt.gain_adu_per_e >= 0.0 && r.params_opt.cam_var_adu2 >= 0.0);
        assert_eq!(r.fd_fallbacks, 0);
    }

    #[test]
    fn early_stop_and_single_iteration() {
        let t = toy_trace();
        let prior = NoiseParams::new(1.6, 9.0).unwrap();
        let one = CalibConfig {
            max_iterations: 1,
            ..Default::default()
        };
        let r = calibrate(&t, &prior, &one, &FilterConfig::default()).unwrap();
        assert_eq!(r.iterations_run, 1);
        assert!(r.no_improvement);
        assert_eq!(r.params_opt, prior);
        assert_eq!(r.vfsi_init, r.vfsi_final);
    }

    #[test]
    fn two_point_grid_is_best_corner() {
        let t = toy_trace();
        let cfg = FilterConfig::default();
        let g = grid_oracle(&t, (1.0, 2.0), (0.0, 9.0), 2, &cfg, 1e-6).unwrap();
        let corners = [(1.0, 0.0), (1.0, 9.0), (2.0, 0.0), (2.0, 9.0)];
        let best = corners
            .iter()
            .map(|&(a, b)| loss(&t, &NoiseParams::new(a, b).unwrap(), &cfg, 1e-6).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(g.loss_best, best);
        assert!(grid_oracle(&t, (1.0, 2.0), (0.0, 9.0), 1, &cfg, 1e-6).is_err());
    }

    #[test]
    fn constant_intensity_is_degenerate() {
        let t = Trace::from_samples(60.0, &vec![0.05; 600], &vec![80.0; 600], "c").unwrap();
        let err = loss(&t, &NoiseParams::zero(), &FilterConfig::default(), 1e-6).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance));
    }
}

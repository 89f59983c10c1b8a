//! Synthetic traces and frames with known flow, volume and noise parameters.
//!
//! The flow waveform is a periodic pulse with a fast systolic upstroke, a
//! diastolic wave and a dicrotic notch. The volume waveform is a smooth
//! pulse with the same period whose harmonic content is made orthogonal, one
//! harmonic at a time, to the flow harmonics. Pearson correlation between
//! the two is then zero at the true noise parameters, and since filtering
//! acts on each harmonic as a complex gain it stays zero after any linear
//! time-invariant filter. Both waveforms are band-limited to the first
//! `min(12, ⌊0.45·fs/hr⌋)` harmonics and scaled to zero mean and unit
//! standard deviation over the trace.
//!
//! Per sample:
//!
//! ```text
//! F      = 1 + flow_pulsatility · f(t)
//! K_f²   = kf2_baseline · mean(F) / F
//! ΔOD    = intensity_pulsatility · v(t)
//! ⟨I⟩    = intensity_baseline_adu · exp(−ΔOD)
//! K_raw² = K_f² + g/⟨I⟩ + σ²/⟨I⟩²
//! ```
//!
//! Sampling noise, when enabled, perturbs `K_raw²` with standard deviation
//! `K_raw²·sqrt(2/N_tiles)` and `⟨I⟩` with `sqrt((g⟨I⟩ + σ²)/N_pixels)`.

use std::f64::consts::PI;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoiseParams;
use crate::trace::{write_frame_header, write_pixels, FrameStack, Trace};

const TEMPLATE_SAMPLES: usize = 2048;
const MAX_HARMONICS: usize = 12;
const SYSTOLIC_TIME_TO_PEAK: f64 = 0.12;
/// Fewest tiles for which the Gaussian contrast-noise draw stays positive
/// (relative spread `sqrt(2/n)` of at most 0.2).
pub const MIN_NOISE_TILES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowWaveform {
    /// Exponent controlling how fast the systolic pulse rises and decays.
    pub peak_sharpness: f64,
    /// Depth of the dicrotic notch relative to the systolic peak.
    pub notch_depth: f64,
}

impl Default for FlowWaveform {
    fn default() -> Self {
        Self {
            peak_sharpness: 1.0,
            notch_depth: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub sampling_rate_hz: f64,
    pub duration_s: f64,
    pub heart_rate_hz: f64,
    pub flow_waveform: FlowWaveform,
    /// Mean true `K_f²`.
    pub kf2_baseline: f64,
    /// Standard deviation of the relative flow modulation.
    pub flow_pulsatility: f64,
    pub intensity_baseline_adu: f64,
    /// Standard deviation of ΔOD.
    pub intensity_pulsatility: f64,
    pub true_gain_adu_per_e: f64,
    pub true_cam_var_adu2: f64,
    /// Δg/g applied to the prior.
    pub injected_dgain_frac: f64,
    /// Δσ²/σ² applied to the prior.
    pub injected_dvar_frac: f64,
    pub frame_width: usize,
    pub frame_height: usize,
    /// Tile side assumed when sizing the contrast sampling noise.
    pub tile_px: usize,
    pub sampling_noise: bool,
    pub rng_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            sampling_rate_hz: 60.0,
            duration_s: 20.0,
            heart_rate_hz: 1.1,
            flow_waveform: FlowWaveform::default(),
            kf2_baseline: 0.005,
            flow_pulsatility: 0.15,
            intensity_baseline_adu: 100.0,
            intensity_pulsatility: 0.15,
            true_gain_adu_per_e: 2.0,
            true_cam_var_adu2: 9.0,
            injected_dgain_frac: -0.2,
            injected_dvar_frac: 0.0,
            frame_width: 1920,
            frame_height: 1200,
            tile_px: 3,
            sampling_noise: true,
            rng_seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn n_samples(&self) -> usize {
        (self.sampling_rate_hz * self.duration_s).round() as usize
    }

    /// Nominal photoelectrons per pixel, `intensity_baseline_adu / g`.
    pub fn signal_level_e_per_px(&self) -> f64 {
        self.intensity_baseline_adu / self.true_gain_adu_per_e
    }

    pub fn with_signal_level(&self, level_e_per_px: f64) -> Self {
        Self {
            intensity_baseline_adu: level_e_per_px * self.true_gain_adu_per_e,
            ..self.clone()
        }
    }

    pub fn n_harmonics(&self) -> usize {
        MAX_HARMONICS.min((0.45 * self.sampling_rate_hz / self.heart_rate_hz).floor() as usize)
    }

    pub fn n_tiles(&self) -> usize {
        (self.frame_width / self.tile_px) * (self.frame_height / self.tile_px)
    }

    pub fn truth_params(&self) -> NoiseParams {
        NoiseParams {
            gain_adu_per_e: self.true_gain_adu_per_e,
            cam_var_adu2: self.true_cam_var_adu2,
        }
    }

    pub fn prior_params(&self) -> NoiseParams {
        NoiseParams {
            gain_adu_per_e: self.true_gain_adu_per_e * (1.0 + self.injected_dgain_frac),
            cam_var_adu2: self.true_cam_var_adu2 * (1.0 + self.injected_dvar_frac),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::SpecInvalid(m));
        let positive = [
            ("sampling_rate_hz", self.sampling_rate_hz),
            ("duration_s", self.duration_s),
            ("kf2_baseline", self.kf2_baseline),
            ("intensity_baseline_adu", self.intensity_baseline_adu),
            ("true_gain_adu_per_e", self.true_gain_adu_per_e),
            ("peak_sharpness", self.flow_waveform.peak_sharpness),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("flow_pulsatility", self.flow_pulsatility),
            ("intensity_pulsatility", self.intensity_pulsatility),
            ("true_cam_var_adu2", self.true_cam_var_adu2),
            ("notch_depth", self.flow_waveform.notch_depth),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.7..=3.0).contains(&self.heart_rate_hz) {
            return fail(format!(
                "heart_rate_hz must lie in [0.7, 3], got {}",
                self.heart_rate_hz
            ));
        }
        for (name, v) in [
            ("injected_dgain_frac", self.injected_dgain_frac),
            ("injected_dvar_frac", self.injected_dvar_frac),
        ] {
            if !(v.abs() < 1.0) {
                return fail(format!("|{name}| must be below 1, got {v}"));
            }
        }
        if self.n_samples() < 2 {
            return fail(format!("trace would have {} samples", self.n_samples()));
        }
        if self.n_harmonics() == 0 {
            return fail("heart rate leaves no harmonic below 0.45·fs".into());
        }
        if self.tile_px == 0 || self.frame_width < self.tile_px || self.frame_height < self.tile_px {
            return fail(format!(
                "frame {}x{} cannot hold a {}px tile",
                self.frame_width, self.frame_height, self.tile_px
            ));
        }
        if self.sampling_noise && self.n_tiles() < MIN_NOISE_TILES {
            return fail(format!(
                "frame {}x{} holds {} tiles of {}px; sampling noise needs at least {MIN_NOISE_TILES}",
                self.frame_width,
                self.frame_height,
                self.n_tiles(),
                self.tile_px
            ));
        }
        Ok(())
    }
}

/// Noiseless per-sample ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveforms {
    /// True flow index `1/K_f²`.
    pub flow: Vec<f64>,
    pub kf2: Vec<f64>,
    pub delta_od: Vec<f64>,
    pub intensity: Vec<f64>,
    pub k_raw_sq: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub trace: Trace,
    pub truth_flow: Vec<f64>,
    pub truth_params: NoiseParams,
    pub prior_params: NoiseParams,
    pub spec: SynthSpec,
}

impl SynthDataset {
    pub fn signal_level_e_per_px(&self) -> f64 {
        self.spec.signal_level_e_per_px()
    }
}

/// Sidecar written next to a synthetic trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub truth_flow: Vec<f64>,
    pub truth_params: NoiseParams,
    pub prior_params: NoiseParams,
    pub spec: SynthSpec,
}

impl From<&SynthDataset> for TruthRecord {
    fn from(d: &SynthDataset) -> Self {
        Self {
            truth_flow: d.truth_flow.clone(),
            truth_params: d.truth_params,
            prior_params: d.prior_params,
            spec: d.spec.clone(),
        }
    }
}

fn periodize(phi: f64, f: impl Fn(f64) -> f64) -> f64 {
    [-1.0, 0.0, 1.0].iter().map(|s| f(phi + s)).sum()
}

fn flow_template(phi: f64, w: &FlowWaveform) -> f64 {
    let e = 2.0 * w.peak_sharpness;
    periodize(phi, |p| {
        let systolic = if p > 0.0 {
            let r = p / SYSTOLIC_TIME_TO_PEAK;
            r.powf(e) * (e * (1.0 - r)).exp()
        } else {
            0.0
        };
        systolic + 0.45 * (-((p - 0.42) / 0.08).powi(2)).exp() - w.notch_depth * (-((p - 0.33) / 0.025).powi(2)).exp()
    })
}

fn volume_template(phi: f64) -> f64 {
    periodize(phi, |p| (-((p - 0.3) / 0.15).powi(2)).exp())
}

/// Complex Fourier coefficients `(re, im)` of harmonics `1..=h`, scaled so
/// that `f(φ) ≈ mean + Σ Re(c_k e^{2πikφ})`.
fn harmonics(f: impl Fn(f64) -> f64, h: usize) -> Vec<(f64, f64)> {
    let m = TEMPLATE_SAMPLES;
    let samples: Vec<f64> = (0..m).map(|j| f(j as f64 / m as f64)).collect();
    (1..=h)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, v) in samples.iter().enumerate() {
                let a = -2.0 * PI * (k * j) as f64 / m as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            (2.0 * re / m as f64, 2.0 * im / m as f64)
        })
        .collect()
}

fn synthesize(coeffs: &[(f64, f64)], phases: &[f64]) -> Vec<f64> {
    phases
        .iter()
        .map(|&phi| {
            coeffs
                .iter()
                .enumerate()
                .map(|(i, &(re, im))| {
                    let a = 2.0 * PI * (i + 1) as f64 * phi;
                    re * a.cos() - im * a.sin()
                })
                .sum()
        })
        .collect()
}

fn standardize(x: &mut [f64]) -> Result<()> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) {
        return Err(Error::SpecInvalid("template has no variation over the trace".into()));
    }
    x.iter_mut().for_each(|v| *v = (*v - m) / sd);
    Ok(())
}

/// Unit-variance flow and volume shapes at each sample time.
fn shapes(spec: &SynthSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = spec.n_harmonics();
    let fc = harmonics(|p| flow_template(p, &spec.flow_waveform), h);
    let vc: Vec<(f64, f64)> = harmonics(volume_template, h)
        .into_iter()
        .zip(&fc)
        .map(|((vr, vi), &(fr, fi))| {
            let p = fr * fr + fi * fi;
            if p == 0.0 {
                return (vr, vi);
            }
            let proj = (vr * fr + vi * fi) / p;
            (vr - proj * fr, vi - proj * fi)
        })
        .collect();
    let phases: Vec<f64> = (0..spec.n_samples())
        .map(|j| (spec.heart_rate_hz * j as f64 / spec.sampling_rate_hz).fract())
        .collect();
    let mut f = synthesize(&fc, &phases);
    let mut v = synthesize(&vc, &phases);
    standardize(&mut f)?;
    standardize(&mut v)?;
    Ok((f, v))
}

pub fn waveforms(spec: &SynthSpec) -> Result<Waveforms> {
    spec.validate()?;
    let (f, v) = shapes(spec)?;
    let flow_rel: Vec<f64> = f.iter().map(|x| 1.0 + spec.flow_pulsatility * x).collect();
    if flow_rel.iter().any(|&x| x <= 0.0) {
        return Err(Error::SpecInvalid(format!(
            "flow_pulsatility {} drives the flow non-positive",
            spec.flow_pulsatility
        )));
    }
    let mean_flow = flow_rel.iter().sum::<f64>() / flow_rel.len() as f64;
    let kf2: Vec<f64> = flow_rel.iter().map(|x| spec.kf2_baseline * mean_flow / x).collect();
    let delta_od: Vec<f64> = v.iter().map(|x| spec.intensity_pulsatility * x).collect();
    let intensity: Vec<f64> = delta_od
        .iter()
        .map(|d| spec.intensity_baseline_adu * (-d).exp())
        .collect();
    let (g, s) = (spec.true_gain_adu_per_e, spec.true_cam_var_adu2);
    let k_raw_sq = kf2
        .iter()
        .zip(&intensity)
        .map(|(k, i)| k + g / i + s / (i * i))
        .collect();
    Ok(Waveforms {
        flow: kf2.iter().map(|k| 1.0 / k).collect(),
        kf2,
        delta_od,
        intensity,
        k_raw_sq,
    })
}

fn normals(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    let w = waveforms(spec)?;
    let (mut k, mut i) = (w.k_raw_sq, w.intensity);
    if spec.sampling_noise {
        let mut rng = ChaCha20Rng::seed_from_u64(spec.rng_seed);
        let n = k.len();
        let nk = normals(&mut rng, n);
        let ni = normals(&mut rng, n);
        let rel = (2.0 / spec.n_tiles() as f64).sqrt();
        let n_pix = (spec.frame_width * spec.frame_height) as f64;
        let (g, s) = (spec.true_gain_adu_per_e, spec.true_cam_var_adu2);
        for j in 0..n {
            k[j] += nk[j] * k[j] * rel;
            i[j] += ni[j] * ((g * i[j] + s) / n_pix).sqrt();
        }
    }
    let label = format!("synth-seed{}-level{}", spec.rng_seed, spec.signal_level_e_per_px());
    let trace = Trace::from_samples(spec.sampling_rate_hz, &k, &i, label)?.with_gain(spec.true_gain_adu_per_e)?;
    Ok(SynthDataset {
        trace,
        truth_flow: w.flow,
        truth_params: spec.truth_params(),
        prior_params: spec.prior_params(),
        spec: spec.clone(),
    })
}

/// Pixels of one frame drawn around the noiseless `⟨I⟩` and `K_f²` at that
/// frame, with variance `K_f²⟨I⟩² + g⟨I⟩ + σ²`. Each frame has its own
/// random stream, so frames can be produced independently and in any order.
pub fn generate_frame(spec: &SynthSpec, w: &Waveforms, index: usize) -> Vec<u16> {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(index as u64 + 1);
    let i = w.intensity[index];
    let sd = (w.kf2[index] * i * i + spec.true_gain_adu_per_e * i + spec.true_cam_var_adu2).sqrt();
    (0..spec.frame_width * spec.frame_height)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (i + sd * z).round().clamp(0.0, f64::from(u16::MAX)) as u16
        })
        .collect()
}

/// One 16-bit frame per trace sample.
pub fn generate_frames(spec: &SynthSpec) -> Result<FrameStack> {
    let w = waveforms(spec)?;
    let frames: Vec<Vec<u16>> = (0..spec.n_samples())
        .into_par_iter()
        .map(|j| generate_frame(spec, &w, j))
        .collect();
    FrameStack::new(spec.frame_width, spec.frame_height, 16, frames.concat())
}

/// Streams the frame stack of [`generate_frames`] to `w` without holding it
/// in memory. Frames are produced in parallel batches.
pub fn write_frames<W: Write>(spec: &SynthSpec, mut w: W) -> std::io::Result<()> {
    const BATCH: usize = 32;
    let wf = waveforms(spec).map_err(std::io::Error::other)?;
    let n = spec.n_samples();
    write_frame_header(&mut w, spec.frame_width, spec.frame_height, n, 16)?;
    for start in (0..n).step_by(BATCH) {
        let batch: Vec<Vec<u16>> = (start..(start + BATCH).min(n))
            .into_par_iter()
            .map(|j| generate_frame(spec, &wf, j))
            .collect();
        for frame in &batch {
            write_pixels(&mut w, frame)?;
        }
    }
    w.flush()
}

/// One dataset per level. Datasets share the seed, so their noise draws are
/// identical up to scaling.
pub fn signal_sweep(base: &SynthSpec, levels_e_per_px: &[f64]) -> Result<Vec<SynthDataset>> {
    if let Some(bad) = levels_e_per_px.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
        return Err(Error::SpecInvalid(format!("signal level must be positive, got {bad}")));
    }
    levels_e_per_px
        .par_iter()
        .map(|&l| generate(&base.with_signal_level(l)))
        .collect()
}

/// `signal_sweep` repeated with seeds `base.rng_seed + r`, ordered by level
/// then repeat.
pub fn signal_sweep_repeated(base: &SynthSpec, levels_e_per_px: &[f64], repeats: usize) -> Result<Vec<SynthDataset>> {
    if let Some(bad) = levels_e_per_px.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
        return Err(Error::SpecInvalid(format!("signal level must be positive, got {bad}")));
    }
    let specs: Vec<SynthSpec> = levels_e_per_px
        .iter()
        .flat_map(|&l| {
            (0..repeats).map(move |r| SynthSpec {
                rng_seed: base.rng_seed.wrapping_add(r as u64),
                ..base.with_signal_level(l)
            })
        })
        .collect();
    specs.par_iter().map(generate).collect()
}

/// `n` levels spaced evenly in log between `lo` and `hi`.
pub fn geometric_levels(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i + 1 == n {
                    hi
                } else {
                    lo * (hi / lo).powf(i as f64 / (n - 1) as f64)
                }
            })
            .collect(),
    }
}

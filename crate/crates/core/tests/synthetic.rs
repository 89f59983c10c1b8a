//! End-to-end checks against the synthetic generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use scos_core::analysis::{fidelity, fit_threshold, run_sweep_study, spearman, StudyConfig, SweepLabel, SweepPoint};
use scos_core::calibrate::{calibrate, grid_oracle, loss, loss_gradient, CalibConfig, GradientMode};
use scos_core::dsp::{self, FilterConfig};
use scos_core::frame_stats::{stack_to_trace, StatsConfig};
use scos_core::noise::{cbf_from_kf2, derive_hemo, subtract_noise, Baseline, NoiseParams};
use scos_core::synth::{self, generate, generate_frames, geometric_levels, signal_sweep, SynthSpec};
use scos_core::Error;

const FLOOR: f64 = 1e-6;

fn at_level(level: f64) -> SynthSpec {
    SynthSpec::default().with_signal_level(level)
}

fn cfg() -> FilterConfig {
    FilterConfig::default()
}

#[test]
fn loss_small_at_truth_for_bright_traces() {
    for level in [200.0, 350.0, 500.0] {
        let d = generate(&at_level(level)).unwrap();
        let l = loss(&d.trace, &d.truth_params, &cfg(), FLOOR).unwrap();
        assert!(l < 0.01, "level {level}: {l}");
    }
}

#[test]
fn loss_large_when_gain_overstated_at_low_signal() {
    let d = generate(&SynthSpec {
        injected_dgain_frac: 0.2,
        ..at_level(35.0)
    })
    .unwrap();
    let l = loss(&d.trace, &d.prior_params, &cfg(), FLOOR).unwrap();
    assert!(l > 0.25, "{l}");
}

#[test]
fn understated_gain_gives_negative_vfsi() {
    let d = generate(&at_level(50.0)).unwrap();
    let v = scos_core::calibrate::LossSurface::new(&d.trace, &cfg(), FLOOR)
        .unwrap()
        .vfsi(&d.prior_params)
        .unwrap();
    assert!(v < -0.5, "{v}");
}

#[test]
fn noiseless_constant_trace_is_degenerate() {
    let d = generate(&SynthSpec {
        flow_pulsatility: 0.0,
        intensity_pulsatility: 0.0,
        sampling_noise: false,
        ..Default::default()
    })
    .unwrap();
    assert!(d.trace.mean_intensity().windows(2).all(|w| w[0] == w[1]));
    assert!(matches!(
        loss(&d.trace, &d.truth_params, &cfg(), FLOOR),
        Err(Error::ZeroVariance)
    ));
}

#[test]
fn exact_priors_give_faithful_flow_at_high_signal() {
    let d = generate(&SynthSpec {
        injected_dgain_frac: 0.0,
        ..at_level(500.0)
    })
    .unwrap();
    let h = derive_hemo(&d.trace, &d.prior_params, &cfg(), Baseline::TraceMean, FLOOR).unwrap();
    let f = fidelity(&h.cbf, &d.truth_flow, 60.0, &cfg()).unwrap();
    assert!(f > 0.999, "{f}");
}

#[test]
fn inverse_consistency_z_scores() {
    let spec = at_level(120.0);
    let d = generate(&spec).unwrap();
    let w = synth::waveforms(&spec).unwrap();
    let kf = subtract_noise(&d.trace, &d.truth_params);
    let rel = (2.0 / spec.n_tiles() as f64).sqrt();
    let n_pix = (spec.frame_width * spec.frame_height) as f64;
    let (g, s) = (spec.true_gain_adu_per_e, spec.true_cam_var_adu2);
    let z: Vec<f64> = kf
        .iter()
        .zip(&w.kf2)
        .enumerate()
        .map(|(j, (&got, &want))| {
            let i = w.intensity[j];
            let sd_i = ((g * i + s) / n_pix).sqrt();
            let sd = (w.k_raw_sq[j] * rel).hypot((g / (i * i) + 2.0 * s / (i * i * i)) * sd_i);
            (got - want) / sd
        })
        .collect();
    let spread = (z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64).sqrt();
    assert!((0.9..1.1).contains(&spread), "{spread}");
    // One draw in 1200 beyond 4 sigma is within chance (p ~ 7%).
    assert!(z.iter().filter(|v| v.abs() >= 4.0).count() <= 1);
}

#[test]
fn electron_accounting() {
    for level in [20.0, 100.0, 500.0] {
        let d = generate(&at_level(level)).unwrap();
        let measured = d.trace.meta().signal_level_e_per_px.unwrap();
        assert!((measured / level - 1.0).abs() < 0.02, "{measured} vs {level}");
    }
}

#[test]
fn sweep_prior_loss_rises_as_signal_falls() {
    let levels = geometric_levels(20.0, 500.0, 10);
    let data = signal_sweep(&SynthSpec::default(), &levels).unwrap();
    let losses: Vec<f64> = data
        .iter()
        .map(|d| loss(&d.trace, &d.prior_params, &cfg(), FLOOR).unwrap())
        .collect();
    let rho = spearman(&levels, &losses).unwrap();
    assert!(rho < -0.8, "{rho}");
}

#[test]
fn analytic_gradient_matches_fd_and_flips_with_miscalibration_sign() {
    let base = at_level(150.0);
    let mut signs = Vec::new();
    for frac in [-0.1, 0.1] {
        let d = generate(&SynthSpec {
            injected_dgain_frac: frac,
            ..base.clone()
        })
        .unwrap();
        let a = loss_gradient(&d.trace, &d.prior_params, &cfg(), FLOOR, GradientMode::Analytic, 1e-5).unwrap();
        let f = loss_gradient(
            &d.trace,
            &d.prior_params,
            &cfg(),
            FLOOR,
            GradientMode::CentralFiniteDifference,
            1e-5,
        )
        .unwrap();
        assert!((a.0 - f.0).abs() < 1e-5 * a.0.abs());
        assert!((a.1 - f.1).abs() < 1e-5 * a.1.abs());
        signs.push(a.0.signum());
    }
    assert_eq!(signs, vec![-1.0, 1.0]);
}

#[test]
fn gradient_vanishes_at_calibrated_minimum() {
    let d = generate(&at_level(80.0)).unwrap();
    let r = calibrate(&d.trace, &d.prior_params, &CalibConfig::default(), &cfg()).unwrap();
    let (dg, ds) = loss_gradient(&d.trace, &r.params_opt, &cfg(), FLOOR, GradientMode::Analytic, 1e-5).unwrap();
    assert!(dg.abs() < 1e-6 && ds.abs() < 1e-6, "{dg} {ds}");
}

#[test]
fn calibration_does_no_harm_without_miscalibration() {
    let d = generate(&SynthSpec {
        injected_dgain_frac: 0.0,
        ..at_level(400.0)
    })
    .unwrap();
    let pre = derive_hemo(&d.trace, &d.prior_params, &cfg(), Baseline::TraceMean, FLOOR).unwrap();
    let r = calibrate(&d.trace, &d.prior_params, &CalibConfig::default(), &cfg()).unwrap();
    let f_pre = fidelity(&pre.cbf, &d.truth_flow, 60.0, &cfg()).unwrap();
    let f_post = fidelity(&r.cbf_opt, &d.truth_flow, 60.0, &cfg()).unwrap();
    assert!(f_post >= f_pre - 0.001, "{f_post} vs {f_pre}");
}

#[test]
fn calibration_result_serializes() {
    let d = generate(&at_level(60.0)).unwrap();
    let r = calibrate(
        &d.trace,
        &d.prior_params,
        &CalibConfig {
            max_iterations: 20,
            ..Default::default()
        },
        &cfg(),
    )
    .unwrap();
    let json = serde_json::to_string(&r).unwrap();
    let back: scos_core::CalibrationResult = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}

#[test]
fn grid_excluding_minimum_lands_on_facing_edge() {
    let d = generate(&at_level(100.0)).unwrap();
    // All gains below truth: the loss falls toward larger gain.
    let g = grid_oracle(&d.trace, (1.0, 1.5), (9.0, 9.0), 11, &cfg(), FLOOR).unwrap();
    assert_eq!(g.gain_best, 1.5);
    assert_eq!(g.surface.len(), 11);
}

#[test]
fn fd_mode_calibrates_too() {
    let d = generate(&at_level(50.0)).unwrap();
    let r = calibrate(
        &d.trace,
        &d.prior_params,
        &CalibConfig {
            gradient_mode: GradientMode::CentralFiniteDifference,
            ..Default::default()
        },
        &cfg(),
    )
    .unwrap();
    assert!(r.vfsi_final.abs() < 0.05);
    assert_eq!(r.fd_fallbacks, 0);
}

#[test]
fn fidelity_attenuation_and_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 1200;
    let d = generate(&SynthSpec::default()).unwrap();
    let reference = &d.truth_flow;
    let hp_ref = dsp::highpass(reference, 60.0, &cfg()).unwrap();
    let sd = (hp_ref.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt() / 100.0;
    let noise = Normal::new(0.0, sd).unwrap();
    let noisy: Vec<f64> = reference.iter().map(|v| v + noise.sample(&mut rng)).collect();
    assert!(fidelity(&noisy, reference, 60.0, &cfg()).unwrap() > 0.99);
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    assert!(fidelity(&white, reference, 60.0, &cfg()).unwrap().abs() < 0.1);
}

#[test]
fn threshold_recovered_under_noise() {
    let c = 50f64.log10();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let pts: Vec<SweepPoint> = (0..40)
            .map(|i| {
                let x = 1.0 + 2.0 * i as f64 / 39.0;
                let y = 0.05 - 0.8 * (x - c).min(0.0) + noise.sample(&mut rng);
                SweepPoint {
                    signal_level_e_per_px: 10f64.powf(x),
                    vfsi_sq: y,
                    fidelity: 1.0,
                    label: SweepLabel::PreOptimization,
                }
            })
            .collect();
        let f = fit_threshold(&pts).unwrap();
        worst = worst.max((f.threshold_e_per_px / 50.0 - 1.0).abs());
    }
    assert!(worst < 0.15, "{worst}");
}

#[test]
fn zero_miscalibration_sweep_keeps_fidelity() {
    let base = SynthSpec {
        injected_dgain_frac: 0.0,
        ..Default::default()
    };
    let data = signal_sweep(&base, &geometric_levels(30.0, 500.0, 6)).unwrap();
    let study = run_sweep_study(&data, &StudyConfig::default());
    assert!(study.failures.is_empty());
    for o in &study.outcomes {
        assert!((o.fidelity_pre - o.fidelity_post).abs() < 0.01, "{o:?}");
    }
}

#[test]
fn single_level_study_keeps_points() {
    let data = signal_sweep(&SynthSpec::default(), &[60.0]).unwrap();
    let study = run_sweep_study(&data, &StudyConfig::default());
    assert_eq!(study.pre.len(), 1);
    assert_eq!(study.post.len(), 1);
    assert!(matches!(study.pre_fit, Err(Error::InsufficientPoints { .. })));
    assert!(study.post[0].vfsi_sq <= study.pre[0].vfsi_sq);
}

#[test]
fn frames_reproduce_intensity_waveform() {
    let spec = SynthSpec {
        duration_s: 1.0,
        frame_width: 140,
        frame_height: 105,
        ..Default::default()
    };
    let w = synth::waveforms(&spec).unwrap();
    let stack = generate_frames(&spec).unwrap();
    assert_eq!(stack.n_frames(), 60);
    let t = stack_to_trace(&stack, &StatsConfig::default(), 60.0).unwrap();
    let n_pix = (spec.frame_width * spec.frame_height) as f64;
    for (j, &m) in t.mean_intensity().iter().enumerate() {
        let i = w.intensity[j];
        let sd = ((w.kf2[j] * i * i + spec.true_gain_adu_per_e * i + spec.true_cam_var_adu2) / n_pix).sqrt();
        assert!(((m - i) / sd).abs() < 4.5, "frame {j}");
    }
}

#[test]
fn per_dataset_post_never_worse_than_pre() {
    let data = signal_sweep(&SynthSpec::default(), &geometric_levels(20.0, 500.0, 6)).unwrap();
    let study = run_sweep_study(&data, &StudyConfig::default());
    for (a, b) in study.pre.iter().zip(&study.post) {
        assert!(b.vfsi_sq <= a.vfsi_sq);
    }
    assert!(cbf_from_kf2(&[0.1], FLOOR).is_ok());
    let _ = NoiseParams::zero();
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use scos_core::analysis::{DatasetOutcome, SweepStudy};
use scos_core::synth::{geometric_levels, signal_sweep_repeated, write_frames, TruthRecord};
use scos_core::trace::write_trace;
use scos_core::{
    calibrate, derive_hemo, generate, load_frame_stack, load_trace, run_sweep_study, stack_to_trace, NoiseParams,
    PriorsPolicy, StudyConfig, SweepPoint, ThresholdFit, Trace,
};
use serde::Serialize;

use crate::config::{load_spec, Provenance, RunConfig};
use crate::error::{CliError, EXIT_SWEEP};
use crate::output::{hemo_csv, OutDir};
use crate::svg::{render, Mark, Panel, Series};

/// Fraction of sweep datasets that must calibrate without error.
pub const MIN_SWEEP_SUCCESS: f64 = 0.8;
/// Distinct signal levels a sweep needs for a threshold fit.
pub const MIN_SWEEP_LEVELS: usize = 6;
pub const DEFAULT_SWEEP_LEVELS: (f64, f64, usize) = (20.0, 500.0, 10);

/// Options shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Common {
    pub config: RunConfig,
    pub out: PathBuf,
    pub no_priors: bool,
}

fn trace_csv(trace: &Trace) -> Vec<u8> {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).expect("writing to memory");
    buf
}

fn label_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn frames_to_trace(c: &Common, stack_path: &Path, rate: Option<f64>) -> Result<(), CliError> {
    let fs = rate
        .or(c.config.sampling_rate_hz)
        .ok_or_else(|| CliError::config("no frame rate: pass --rate or set `sampling_rate_hz`"))?;
    if !(fs.is_finite() && fs > 0.0) {
        return Err(CliError::config(format!("sampling rate must be positive, got {fs}")));
    }
    let stack = load_frame_stack(stack_path)?;
    let trace = stack_to_trace(&stack, &c.config.stats, fs)?.with_label(label_of(stack_path));

    let out = OutDir::create(&c.out)?;
    out.write("trace.csv", &trace_csv(&trace))?;
    let mut prov = Provenance::new("frames-to-trace", &c.config, c.no_priors);
    prov.inputs.push(stack_path.display().to_string());
    out.write_json("config.json", &prov)?;

    println!(
        "frames={} mean_intensity={:.6} mean_k_raw_sq={:.6e}",
        trace.len(),
        mean(&trace.mean_intensity()),
        mean(&trace.k_raw_sq())
    );
    Ok(())
}

fn waveform_svg(times: &[f64], pre: &[f64], post: &[f64], cbv: &[f64]) -> String {
    let z = |x: &[f64]| -> Vec<(f64, f64)> {
        let m = mean(x);
        let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        times.iter().zip(x).map(|(&t, &v)| (t, (v - m) / sd)).collect()
    };
    render(&[Panel {
        title: "High-passed waveforms (standardized)".into(),
        x_label: "time (s)".into(),
        y_label: "z-score".into(),
        log_x: false,
        series: vec![
            Series::new("CBV", "#2ca02c", Mark::Line, z(cbv)),
            Series::new("CBF before", "#d62728", Mark::Line, z(pre)),
            Series::new("CBF after", "#1f77b4", Mark::Line, z(post)),
        ],
    }])
}

pub fn calibrate_trace(c: &Common, trace_path: &Path, rate: Option<f64>) -> Result<(), CliError> {
    let cfg = &c.config;
    let priors = if c.no_priors {
        NoiseParams::zero()
    } else {
        cfg.priors
            .ok_or_else(|| CliError::config("no priors: set `priors` in the config or pass --no-priors"))?
    };
    let trace = load_trace(trace_path, rate.or(cfg.sampling_rate_hz))?;
    cfg.filter.validate(trace.sampling_rate_hz())?;

    let result = calibrate(&trace, &priors, &cfg.calib, &cfg.filter)?;
    let floor = cfg.calib.kf2_floor;
    let pre = derive_hemo(&trace, &result.params_init, &cfg.filter, cfg.baseline, floor)?;
    let post = derive_hemo(&trace, &result.params_opt, &cfg.filter, cfg.baseline, floor)?;
    let times = trace.times();

    let out = OutDir::create(&c.out)?;
    out.write_json("result.json", &result)?;
    out.write("hemo_pre.csv", hemo_csv(&times, &pre).as_bytes())?;
    out.write("hemo_post.csv", hemo_csv(&times, &post).as_bytes())?;
    out.write(
        "waveform.svg",
        waveform_svg(&times, &pre.cbf_hp, &post.cbf_hp, &pre.cbv_hp).as_bytes(),
    )?;
    let mut prov = Provenance::new("calibrate", cfg, c.no_priors);
    prov.inputs.push(trace_path.display().to_string());
    out.write_json("config.json", &prov)?;

    println!(
        "vfsi_pre={:.6} vfsi_post={:.6} gain={:.6} cam_var={:.6} iterations={} best_iteration={}{}",
        result.vfsi_init,
        result.vfsi_final,
        result.params_opt.gain_adu_per_e,
        result.params_opt.cam_var_adu2,
        result.iterations_run,
        result.best_iteration,
        if result.no_improvement { " no_improvement" } else { "" }
    );
    Ok(())
}

pub fn synth(c: &Common, spec_path: Option<&Path>, seed: Option<u64>, frames: bool) -> Result<(), CliError> {
    let mut spec = load_spec(spec_path)?;
    if let Some(s) = seed.or(c.config.seed) {
        spec.rng_seed = s;
    }
    let d = generate(&spec)?;

    let out = OutDir::create(&c.out)?;
    out.write("trace.csv", &trace_csv(&d.trace))?;
    out.write_json("truth.json", &TruthRecord::from(&d))?;
    if frames {
        out.write_with("frames.bin", |w| write_frames(&spec, w))?;
    }
    let mut prov = Provenance::new("synth", &c.config, c.no_priors);
    prov.spec = Some(&spec);
    if let Some(p) = spec_path {
        prov.inputs.push(p.display().to_string());
    }
    out.write_json("config.json", &prov)?;

    println!(
        "samples={} signal_level_e_per_px={:.3} truth=({}, {}) prior=({}, {})",
        d.trace.len(),
        d.signal_level_e_per_px(),
        d.truth_params.gain_adu_per_e,
        d.truth_params.cam_var_adu2,
        d.prior_params.gain_adu_per_e,
        d.prior_params.cam_var_adu2
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct ThresholdRecord {
    pre: Option<ThresholdFit>,
    post: Option<ThresholdFit>,
    pre_error: Option<String>,
    post_error: Option<String>,
}

fn sweep_csv(study: &SweepStudy) -> String {
    let mut out = String::from("label,signal_level_e_per_px,vfsi_sq,fidelity\n");
    for p in study.pre.iter().chain(&study.post) {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.label.as_str(),
            p.signal_level_e_per_px,
            p.vfsi_sq,
            p.fidelity
        );
    }
    out
}

fn hinge_curve(fit: &ThresholdFit, points: &[SweepPoint]) -> Vec<(f64, f64)> {
    let (lo, hi) = points.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), p| {
        (lo.min(p.signal_level_e_per_px), hi.max(p.signal_level_e_per_px))
    });
    let mut xs = vec![lo, hi];
    if fit.threshold_e_per_px > lo && fit.threshold_e_per_px < hi {
        xs.insert(1, fit.threshold_e_per_px);
    }
    xs.into_iter().map(|x| (x, fit.predict(x))).collect()
}

fn threshold_panel(
    title: &str,
    points: &[SweepPoint],
    fit: &scos_core::Result<ThresholdFit>,
    color: &'static str,
) -> Panel {
    let mut series = vec![Series::new(
        "VFSI²",
        color,
        Mark::Dots,
        points.iter().map(|p| (p.signal_level_e_per_px, p.vfsi_sq)).collect(),
    )];
    let mut title = title.to_string();
    if let Ok(fit) = fit {
        series.push(Series::new(
            "hinge fit",
            "#333333",
            Mark::Line,
            hinge_curve(fit, points),
        ));
        let _ = write!(
            title,
            ": threshold {:.1} e/px{}",
            fit.threshold_e_per_px,
            if fit.reliable { "" } else { " (unreliable)" }
        );
    }
    Panel {
        title,
        x_label: "signal (e⁻/px)".into(),
        y_label: "VFSI²".into(),
        log_x: true,
        series,
    }
}

fn fit_summary(name: &str, fit: &scos_core::Result<ThresholdFit>) -> String {
    match fit {
        Ok(f) => format!(
            "{name}: threshold {:.3} e/px, left slope {:.4} ± {:.4}, right slope {:.4}, slope difference SE {:.4}, reliable {}\n",
            f.threshold_e_per_px, f.left_slope, f.left_slope_se, f.right_slope, f.slope_diff_se, f.reliable
        ),
        Err(e) => format!("{name}: fit failed: {e}\n"),
    }
}

fn sweep_report(study: &SweepStudy, levels: &[f64], repeats: usize) -> String {
    let mut r = String::new();
    let _ = writeln!(
        r,
        "datasets: {} ({} levels x {} repeats), succeeded: {}, failed: {} ({:.1}% success)",
        study.n_datasets(),
        levels.len(),
        repeats,
        study.outcomes.len(),
        study.failures.len(),
        100.0 * study.success_fraction()
    );
    r.push_str(&fit_summary("pre-optimization", &study.pre_fit));
    r.push_str(&fit_summary("post-optimization", &study.post_fit));
    if let (Ok(a), Ok(b)) = (&study.pre_fit, &study.post_fit) {
        let _ = writeln!(
            r,
            "threshold change: {:.3} -> {:.3} e/px",
            a.threshold_e_per_px, b.threshold_e_per_px
        );
    }
    r.push_str("\nindex,level,seed,vfsi_pre,vfsi_post,fidelity_pre,fidelity_post,gain_init,cam_var_init,gain_opt,cam_var_opt,no_improvement\n");
    for o in &study.outcomes {
        let DatasetOutcome {
            index,
            signal_level_e_per_px,
            rng_seed,
            vfsi_pre,
            vfsi_post,
            fidelity_pre,
            fidelity_post,
            params_init,
            params_opt,
            no_improvement,
        } = o;
        let _ = writeln!(
            r,
            "{index},{signal_level_e_per_px},{rng_seed},{vfsi_pre},{vfsi_post},{fidelity_pre},{fidelity_post},{},{},{},{},{no_improvement}",
            params_init.gain_adu_per_e, params_init.cam_var_adu2, params_opt.gain_adu_per_e, params_opt.cam_var_adu2
        );
    }
    if !study.failures.is_empty() {
        r.push_str("\nfailures:\n");
        for f in &study.failures {
            let _ = writeln!(
                r,
                "index {} level {} seed {}: {}",
                f.index, f.signal_level_e_per_px, f.rng_seed, f.error
            );
        }
    }
    r
}

pub fn sweep(
    c: &Common,
    spec_path: Option<&Path>,
    seed: Option<u64>,
    levels: Option<Vec<f64>>,
    repeats: usize,
) -> Result<(), CliError> {
    let mut spec = load_spec(spec_path)?;
    if let Some(s) = seed.or(c.config.seed) {
        spec.rng_seed = s;
    }
    let levels = levels.unwrap_or_else(|| {
        let (lo, hi, n) = DEFAULT_SWEEP_LEVELS;
        geometric_levels(lo, hi, n)
    });
    let mut distinct = levels.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < MIN_SWEEP_LEVELS {
        return Err(scos_core::Error::InsufficientPoints {
            needed: MIN_SWEEP_LEVELS,
            got: distinct.len(),
        }
        .into());
    }
    if repeats == 0 {
        return Err(CliError::config("repeats must be at least 1"));
    }
    c.config.filter.validate(spec.sampling_rate_hz)?;

    let datasets = signal_sweep_repeated(&spec, &levels, repeats)?;
    let study_cfg = StudyConfig {
        calib: c.config.calib,
        filter: c.config.filter,
        priors: if c.no_priors {
            PriorsPolicy::Zero
        } else {
            PriorsPolicy::Informed
        },
    };
    let study = run_sweep_study(&datasets, &study_cfg);

    let out = OutDir::create(&c.out)?;
    out.write("sweep.csv", sweep_csv(&study).as_bytes())?;
    let record = ThresholdRecord {
        pre: study.pre_fit.as_ref().ok().copied(),
        post: study.post_fit.as_ref().ok().copied(),
        pre_error: study.pre_fit.as_ref().err().map(ToString::to_string),
        post_error: study.post_fit.as_ref().err().map(ToString::to_string),
    };
    out.write_json("threshold.json", &record)?;
    let svg = render(&[
        threshold_panel("Before calibration", &study.pre, &study.pre_fit, "#d62728"),
        threshold_panel("After calibration", &study.post, &study.post_fit, "#1f77b4"),
    ]);
    out.write("threshold.svg", svg.as_bytes())?;
    let report = sweep_report(&study, &levels, repeats);
    out.write("report.txt", report.as_bytes())?;
    let mut prov = Provenance::new("sweep", &c.config, c.no_priors);
    prov.spec = Some(&spec);
    prov.levels_e_per_px = Some(&levels);
    prov.repeats = Some(repeats);
    if let Some(p) = spec_path {
        prov.inputs.push(p.display().to_string());
    }
    out.write_json("config.json", &prov)?;

    print!(
        "{}",
        report.lines().take(3).map(|l| format!("{l}\n")).collect::<String>()
    );

    if study.success_fraction() < MIN_SWEEP_SUCCESS {
        return Err(CliError::new(
            EXIT_SWEEP,
            "sweep-failed",
            format!(
                "{} of {} datasets failed (see report.txt)",
                study.failures.len(),
                study.n_datasets()
            ),
        ));
    }
    let SweepStudy { pre_fit, post_fit, .. } = study;
    for (name, fit) in [("pre-optimization", pre_fit), ("post-optimization", post_fit)] {
        if let Err(e) = fit {
            let mut err = CliError::from(e);
            err.detail = format!("{name} fit: {}", err.detail);
            return Err(err.with_code(EXIT_SWEEP));
        }
    }
    Ok(())
}

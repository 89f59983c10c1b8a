//! Noise-parameter calibration for speckle contrast optical spectroscopy.
//!
//! A trace of per-frame speckle contrast `K_raw²` and mean intensity `⟨I⟩`
//! is turned into a blood-flow waveform `1/K_f²` after subtracting shot- and
//! camera-noise contrast. Errors in the subtracted terms leak the volume
//! waveform into the flow waveform, which shows up as correlation between
//! the high-passed flow and optical-density signals (VFSI). [`calibrate`]
//! adjusts the gain and camera variance to drive that correlation to zero.

pub mod analysis;
pub mod calibrate;
pub mod dsp;
pub mod error;
pub mod frame_stats;
pub mod noise;
pub mod synth;
pub mod trace;

pub use analysis::{
    fidelity, fit_threshold, run_sweep_study, spearman, PriorsPolicy, StudyConfig, SweepLabel, SweepPoint, SweepStudy,
    ThresholdFit,
};
pub use calibrate::{
    calibrate, calibrate_observed, grid_oracle, loss, loss_gradient, CalibConfig, CalibrationResult, GradientMode,
};
pub use dsp::{highpass, pearson, vfsi, FilterConfig, Highpass};
pub use error::{Error, Result};
pub use frame_stats::{frame_k_raw_sq, stack_to_trace, FrameView, StatsConfig};
pub use noise::{
    cbf_from_kf2, cbv_from_intensity, derive_hemo, subtract_noise, Baseline, HemoSignals, NoiseParams,
    DEFAULT_KF2_FLOOR,
};
pub use synth::{generate, generate_frames, signal_sweep, SynthDataset, SynthSpec};
pub use trace::{load_frame_stack, load_trace, save_trace, FrameStack, Trace, TraceMeta, TracePoint};

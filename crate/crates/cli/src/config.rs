use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use scos_core::{Baseline, CalibConfig, FilterConfig, NoiseParams, StatsConfig, SynthSpec};

use crate::error::CliError;

/// Everything a run needs besides its input files. Every field is optional
/// in the JSON document and falls back to the library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stats: StatsConfig,
    pub filter: FilterConfig,
    pub calib: CalibConfig,
    pub baseline: Baseline,
    /// Starting noise parameters for `calibrate`.
    pub priors: Option<NoiseParams>,
    /// Frame rate for stacks, or an override for traces.
    pub sampling_rate_hz: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.stats.validate()?;
        self.calib.validate()?;
        if let Some(p) = &self.priors {
            p.validate()?;
        }
        if let Baseline::Explicit(i0) = self.baseline {
            if !(i0.is_finite() && i0 > 0.0) {
                return Err(scos_core::Error::NonPositiveBaseline(i0).into());
            }
        }
        if let Some(fs) = self.sampling_rate_hz {
            if !(fs.is_finite() && fs > 0.0) {
                return Err(CliError::config(format!("sampling rate must be positive, got {fs}")));
            }
            self.filter.validate(fs)?;
        }
        Ok(())
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Synthetic spec from a JSON file, or the default spec. Problems with the
/// document itself count as an invalid spec.
pub fn load_spec(path: Option<&Path>) -> Result<SynthSpec, CliError> {
    let spec: SynthSpec = match path {
        Some(p) => read_json(p).map_err(|e| {
            if e.kind == "invalid-config" {
                CliError::new(crate::error::EXIT_SPEC, "spec-invalid", e.detail)
            } else {
                e
            }
        })?,
        None => SynthSpec::default(),
    };
    spec.validate()?;
    Ok(spec)
}

/// Record of a run, written as `config.json` next to its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub inputs: Vec<String>,
    pub no_priors: bool,
    pub config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<&'a SynthSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels_e_per_px: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repeats: Option<usize>,
}

impl<'a> Provenance<'a> {
    pub fn new(command: &'static str, config: &'a RunConfig, no_priors: bool) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            inputs: Vec::new(),
            no_priors,
            config,
            spec: None,
            levels_e_per_px: None,
            repeats: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_nested_config() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"calib": {"max_iterations": 50}, "priors": {"gain_adu_per_e": 2, "cam_var_adu2": 9}}"#,
        )
        .unwrap();
        assert_eq!(cfg.calib.max_iterations, 50);
        assert_eq!(cfg.calib.learning_rate, CalibConfig::default().learning_rate);
        assert_eq!(cfg.priors.unwrap().cam_var_adu2, 9.0);
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"calibration": {}}"#).is_err());
    }

    #[test]
    fn bad_nested_values_rejected() {
        let mut cfg = RunConfig::default();
        cfg.stats.window_px = 4;
        assert_eq!(cfg.validate().unwrap_err().kind, "invalid-config");
        let cfg = RunConfig {
            sampling_rate_hz: Some(0.8),
            ..Default::default()
        };
        assert_eq!(cfg.validate().unwrap_err().kind, "cutoff-above-nyquist");
    }
}

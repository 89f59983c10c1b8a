use std::fmt;
use std::path::Path;

use scos_core::Error;

pub const EXIT_IO: u8 = 2;
pub const EXIT_GEOMETRY: u8 = 3;
pub const EXIT_DEGENERATE: u8 = 4;
pub const EXIT_SPEC: u8 = 5;
pub const EXIT_SWEEP: u8 = 6;

/// A failure reported on stderr as `error:<kind>:<detail>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub detail: String,
}

impl CliError {
    pub fn new(code: u8, kind: &'static str, detail: impl Into<String>) -> Self {
        Self {
            code,
            kind,
            detail: detail.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Self::new(EXIT_SPEC, "invalid-config", detail)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        if err.kind() == std::io::ErrorKind::NotFound {
            Self::new(EXIT_IO, "file-not-found", path.display().to_string())
        } else {
            Self::new(EXIT_IO, "io", format!("{}: {err}", path.display()))
        }
    }

    pub fn with_code(mut self, code: u8) -> Self {
        self.code = code;
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let detail = self.detail.replace(['\n', '\r'], " ");
        write!(f, "error:{}:{}", self.kind, detail)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::FileNotFound(path) => return Self::new(EXIT_IO, "file-not-found", path.display().to_string()),
            Error::Io { .. } => (EXIT_IO, "io"),
            Error::MissingColumn { .. } => (EXIT_IO, "missing-column"),
            Error::InvalidValue { .. } => (EXIT_IO, "invalid-value"),
            Error::NonMonotonicTime { .. } => (EXIT_IO, "non-monotonic-time"),
            Error::IrregularSampling { .. } => (EXIT_IO, "irregular-sampling"),
            Error::NonPositiveIntensity { .. } => (EXIT_IO, "non-positive-intensity"),
            Error::NegativeContrast { .. } => (EXIT_IO, "negative-contrast"),
            Error::BadMagic => (EXIT_IO, "bad-magic"),
            Error::UnsupportedVersion(_) => (EXIT_IO, "unsupported-version"),
            Error::TruncatedFile { .. } => (EXIT_IO, "truncated-file"),
            Error::PixelOutOfRange { .. } => (EXIT_IO, "pixel-out-of-range"),
            Error::FrameTooSmall { .. } => (EXIT_GEOMETRY, "frame-too-small"),
            Error::ZeroMeanTile { .. } => (EXIT_GEOMETRY, "zero-mean-tile"),
            Error::InvalidConfig(_) => (EXIT_SPEC, "invalid-config"),
            Error::NonPositiveBaseline(_) => (EXIT_DEGENERATE, "non-positive-baseline"),
            Error::TooShort { .. } => (EXIT_DEGENERATE, "too-short"),
            Error::CutoffAboveNyquist { .. } => (EXIT_SPEC, "cutoff-above-nyquist"),
            Error::LengthMismatch { .. } => (EXIT_DEGENERATE, "length-mismatch"),
            Error::ZeroVariance => (EXIT_DEGENERATE, "zero-variance"),
            Error::NonFiniteLoss { .. } => (EXIT_DEGENERATE, "non-finite-loss"),
            Error::SpecInvalid(_) => (EXIT_SPEC, "spec-invalid"),
            Error::InsufficientPoints { .. } => (EXIT_SWEEP, "insufficient-points"),
            Error::TooFewLevels { .. } => (EXIT_SWEEP, "too-few-levels"),
            Error::DegenerateSpread { .. } => (EXIT_SWEEP, "degenerate-spread"),
            Error::Json(_) => (EXIT_SPEC, "invalid-json"),
        };
        Self::new(code, kind, e.to_string())
    }
}

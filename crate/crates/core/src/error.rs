use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the pipeline.
///
/// Row numbers are 1-based data rows (the CSV header is not counted).
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("i/o failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing column `{column}`")]
    MissingColumn { column: String },
    #[error("row {row}: cannot parse `{column}`: {message}")]
    InvalidValue {
        row: usize,
        column: String,
        message: String,
    },
    #[error("row {row}: time is not strictly increasing")]
    NonMonotonicTime { row: usize },
    #[error("row {row}: sample spacing deviates from uniform sampling")]
    IrregularSampling { row: usize },
    #[error("row {row}: mean intensity must be positive")]
    NonPositiveIntensity { row: usize },
    #[error("row {row}: k_raw_sq must be finite and non-negative")]
    NegativeContrast { row: usize },
    #[error("bad magic bytes, expected `SCOS`")]
    BadMagic,
    #[error("unsupported frame stack version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated file: expected {expected} bytes of payload, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("frame {frame}, pixel {index}: value {value} exceeds bit depth {bit_depth}")]
    PixelOutOfRange {
        frame: usize,
        index: usize,
        value: u16,
        bit_depth: u16,
    },
    #[error("frame {width}x{height} is smaller than the {window}px window")]
    FrameTooSmall { width: usize, height: usize, window: usize },
    #[error("frame {frame:?}, tile ({tile_x}, {tile_y}): tile mean {mean} is not positive")]
    ZeroMeanTile {
        frame: Option<usize>,
        tile_x: usize,
        tile_y: usize,
        mean: f64,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("baseline intensity must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("sequence of length {len} is too short (need at least {min})")]
    TooShort { len: usize, min: usize },
    #[error("cutoff {cutoff_hz} Hz is not below Nyquist ({nyquist_hz} Hz)")]
    CutoffAboveNyquist { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("signal has zero variance")]
    ZeroVariance,
    #[error("non-finite loss at iteration {iteration} (g = {gain}, cam_var = {cam_var})")]
    NonFiniteLoss { iteration: usize, gain: f64, cam_var: f64 },
    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),
    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("need at least {needed} distinct signal levels, got {got}")]
    TooFewLevels { needed: usize, got: usize },
    #[error("signal levels span a factor of {ratio:.3}, need at least {needed}")]
    DegenerateSpread { ratio: f64, needed: f64 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}

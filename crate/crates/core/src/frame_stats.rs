//! Per-frame speckle statistics.
//!
//! Pixels are dark-offset corrected, optionally divided by a flat-field
//! profile, and cut into non-overlapping square tiles. `K_raw²` is the mean
//! over tiles of `s²/m²` (unbiased tile variance over squared tile mean).
//! Pixels in a partial tile at the right or bottom edge are not used for
//! contrast. The reported mean intensity is the plain mean of the
//! offset-corrected pixels, without flat-field division, so it stays in ADU.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{FrameStack, Trace};

/// Mean-intensity profile used to flatten slow spatial variations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flatfield {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    /// Side of the square tile; odd, at least 3.
    pub window_px: usize,
    pub flatfield: Option<Flatfield>,
    pub dark_offset_adu: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            window_px: 7,
            flatfield: None,
            dark_offset_adu: 0.0,
        }
    }
}

impl StatsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_px < 3 || self.window_px.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "window must be odd and at least 3, got {}",
                self.window_px
            )));
        }
        if !(self.dark_offset_adu.is_finite() && self.dark_offset_adu >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "dark offset must be non-negative, got {}",
                self.dark_offset_adu
            )));
        }
        if let Some(ff) = &self.flatfield {
            if ff.values.len() != ff.width * ff.height {
                return Err(Error::InvalidConfig(format!(
                    "flat-field has {} values for {}x{}",
                    ff.values.len(),
                    ff.width,
                    ff.height
                )));
            }
            if ff.values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidConfig("flat-field entries must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a> {
    pub width: usize,
    pub height: usize,
    pub pixels: &'a [u16],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameContrast {
    pub k_raw_sq: f64,
    pub mean_intensity: f64,
}

pub fn tile_count(width: usize, height: usize, window_px: usize) -> usize {
    (width / window_px) * (height / window_px)
}

pub fn frame_k_raw_sq(frame: FrameView<'_>, cfg: &StatsConfig) -> Result<FrameContrast> {
    cfg.validate()?;
    let FrameView { width, height, pixels } = frame;
    debug_assert_eq!(pixels.len(), width * height);
    let w = cfg.window_px;
    if width < w || height < w {
        return Err(Error::FrameTooSmall {
            width,
            height,
            window: w,
        });
    }
    let flat = match &cfg.flatfield {
        Some(ff) if ff.width != width || ff.height != height => {
            return Err(Error::InvalidConfig(format!(
                "flat-field is {}x{}, frame is {width}x{height}",
                ff.width, ff.height
            )))
        }
        Some(ff) => Some(ff.values.as_slice()),
        None => None,
    };
    let offset = cfg.dark_offset_adu;

    let total: f64 = pixels.iter().map(|&p| f64::from(p) - offset).sum();
    let mean_intensity = total / pixels.len() as f64;

    let (nx, ny) = (width / w, height / w);
    let mut contrast_sum = 0.0;
    for ty in 0..ny {
        for tx in 0..nx {
            // Welford accumulation over the tile.
            let (mut n, mut m, mut m2) = (0.0f64, 0.0f64, 0.0f64);
            for y in ty * w..(ty + 1) * w {
                let row = y * width;
                for x in tx * w..(tx + 1) * w {
                    let idx = row + x;
                    let mut v = f64::from(pixels[idx]) - offset;
                    if let Some(f) = flat {
                        v /= f[idx];
                    }
                    n += 1.0;
                    let d = v - m;
                    m += d / n;
                    m2 += d * (v - m);
                }
            }
            if m <= 0.0 {
                return Err(Error::ZeroMeanTile {
                    frame: None,
                    tile_x: tx,
                    tile_y: ty,
                    mean: m,
                });
            }
            contrast_sum += (m2 / (n - 1.0)) / (m * m);
        }
    }
    Ok(FrameContrast {
        k_raw_sq: contrast_sum / (nx * ny) as f64,
        mean_intensity,
    })
}

/// One trace sample per frame at `t = index / sampling_rate_hz`. Frames are
/// processed in parallel; output order follows frame order.
pub fn stack_to_trace(stack: &FrameStack, cfg: &StatsConfig, sampling_rate_hz: f64) -> Result<Trace> {
    cfg.validate()?;
    let (width, height) = (stack.width(), stack.height());
    let stats: Vec<FrameContrast> = (0..stack.n_frames())
        .into_par_iter()
        .map(|i| {
            let view = FrameView {
                width,
                height,
                pixels: stack.frame(i),
            };
            frame_k_raw_sq(view, cfg).map_err(|e| match e {
                Error::ZeroMeanTile {
                    tile_x, tile_y, mean, ..
                } => Error::ZeroMeanTile {
                    frame: Some(i),
                    tile_x,
                    tile_y,
                    mean,
                },
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let k: Vec<f64> = stats.iter().map(|s| s.k_raw_sq).collect();
    let m: Vec<f64> = stats.iter().map(|s| s.mean_intensity).collect();
    Trace::from_samples(sampling_rate_hz, &k, &m, "frames")
}

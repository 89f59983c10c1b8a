//! Traces of per-frame speckle statistics and raw camera frame stacks,
//! plus their on-disk formats.
//!
//! Trace CSV: UTF-8, header `t,k_raw_sq,mean_intensity`, one row per frame,
//! LF line endings. Values are written with Rust's shortest round-trip float
//! formatting, so a save/load cycle is bit-exact.
//!
//! Frame stack binary (all integers little-endian):
//!
//! ```text
//! "SCOS" | version: u16 = 1 | width: u32 | height: u32 | n_frames: u32 |
//! bit_depth: u16 in {8, 10, 12, 16} | n_frames * height * width u16 pixels, row-major
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed deviation of a sample time from the uniform grid, in seconds.
pub const TIME_TOLERANCE_S: f64 = 1e-6;

pub const TRACE_HEADER: [&str; 3] = ["t", "k_raw_sq", "mean_intensity"];

pub const FRAME_MAGIC: &[u8; 4] = b"SCOS";
pub const FRAME_VERSION: u16 = 1;
const FRAME_HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4 + 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub sampling_rate_hz: f64,
    pub duration_s: f64,
    pub source_label: String,
    /// Mean photoelectrons per pixel; only known once a gain has been applied.
    pub signal_level_e_per_px: Option<f64>,
}

impl TraceMeta {
    pub fn new(sampling_rate_hz: f64, n_samples: usize, source_label: impl Into<String>) -> Result<Self> {
        if !(sampling_rate_hz.is_finite() && sampling_rate_hz > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sampling rate must be positive, got {sampling_rate_hz}"
            )));
        }
        Ok(Self {
            sampling_rate_hz,
            duration_s: n_samples as f64 / sampling_rate_hz,
            source_label: source_label.into(),
            signal_level_e_per_px: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// Seconds.
    pub t: f64,
    /// Raw speckle contrast squared, dimensionless.
    pub k_raw_sq: f64,
    /// Spatial mean intensity in ADU.
    pub mean_intensity: f64,
}

/// A uniformly sampled time series of `(K_raw², ⟨I⟩)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    meta: TraceMeta,
    points: Vec<TracePoint>,
}

impl Trace {
    /// Validates `points` against `meta`: finite values, positive intensity,
    /// non-negative contrast, strictly increasing and uniformly spaced time.
    pub fn new(meta: TraceMeta, points: Vec<TracePoint>) -> Result<Self> {
        if !(meta.sampling_rate_hz.is_finite() && meta.sampling_rate_hz > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sampling rate must be positive, got {}",
                meta.sampling_rate_hz
            )));
        }
        validate_points(&points)?;
        check_uniform(&points, 1.0 / meta.sampling_rate_hz)?;
        let n = points.len() as f64;
        let expected = meta.sampling_rate_hz * meta.duration_s;
        if !points.is_empty() && (expected.round() - n).abs() > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "duration {} s at {} Hz implies {} samples, trace has {}",
                meta.duration_s, meta.sampling_rate_hz, expected, n
            )));
        }
        Ok(Self { meta, points })
    }

    /// Builds a trace sampled at `t = i / sampling_rate_hz`.
    pub fn from_samples(
        sampling_rate_hz: f64,
        k_raw_sq: &[f64],
        mean_intensity: &[f64],
        source_label: impl Into<String>,
    ) -> Result<Self> {
        if k_raw_sq.len() != mean_intensity.len() {
            return Err(Error::LengthMismatch {
                left: k_raw_sq.len(),
                right: mean_intensity.len(),
            });
        }
        let meta = TraceMeta::new(sampling_rate_hz, k_raw_sq.len(), source_label)?;
        let points = k_raw_sq
            .iter()
            .zip(mean_intensity)
            .enumerate()
            .map(|(i, (&k, &m))| TracePoint {
                t: i as f64 / sampling_rate_hz,
                k_raw_sq: k,
                mean_intensity: m,
            })
            .collect();
        Self::new(meta, points)
    }

    pub fn meta(&self) -> &TraceMeta {
        &self.meta
    }

    pub fn points(&self) -> &[TracePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn sampling_rate_hz(&self) -> f64 {
        self.meta.sampling_rate_hz
    }

    pub fn k_raw_sq(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.k_raw_sq).collect()
    }

    pub fn mean_intensity(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean_intensity).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.t).collect()
    }

    /// Records the signal level implied by `gain_adu_per_e`: mean ⟨I⟩ / g.
    pub fn with_gain(mut self, gain_adu_per_e: f64) -> Result<Self> {
        if !(gain_adu_per_e.is_finite() && gain_adu_per_e > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gain must be positive to derive a signal level, got {gain_adu_per_e}"
            )));
        }
        let mean = crate::dsp::mean(&self.mean_intensity());
        self.meta.signal_level_e_per_px = Some(mean / gain_adu_per_e);
        Ok(self)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.meta.source_label = label.into();
        self
    }
}

fn validate_points(points: &[TracePoint]) -> Result<()> {
    for (i, p) in points.iter().enumerate() {
        let row = i + 1;
        if !p.t.is_finite() {
            return Err(Error::InvalidValue {
                row,
                column: "t".into(),
                message: "not finite".into(),
            });
        }
        if !(p.mean_intensity.is_finite() && p.mean_intensity > 0.0) {
            return Err(Error::NonPositiveIntensity { row });
        }
        if !(p.k_raw_sq.is_finite() && p.k_raw_sq >= 0.0) {
            return Err(Error::NegativeContrast { row });
        }
        if i > 0 && p.t <= points[i - 1].t {
            return Err(Error::NonMonotonicTime { row });
        }
    }
    Ok(())
}

fn check_uniform(points: &[TracePoint], dt: f64) -> Result<()> {
    let Some(first) = points.first() else {
        return Ok(());
    };
    for (i, p) in points.iter().enumerate().skip(1) {
        if (p.t - first.t - i as f64 * dt).abs() > TIME_TOLERANCE_S {
            return Err(Error::IrregularSampling { row: i + 1 });
        }
    }
    Ok(())
}

/// Reads a trace CSV. When `sampling_rate_hz` is `None` the rate is inferred
/// from the time column, which then needs at least two rows.
pub fn load_trace(path: impl AsRef<Path>, sampling_rate_hz: Option<f64>) -> Result<Trace> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_trace(file, sampling_rate_hz, label)
}

pub fn read_trace<R: Read>(reader: R, sampling_rate_hz: Option<f64>, source_label: impl Into<String>) -> Result<Trace> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let mut columns = [0usize; 3];
    for (slot, name) in columns.iter_mut().zip(TRACE_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn { column: name.into() })?;
    }

    let mut points = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(csv_error)?;
        let field = |c: usize| -> Result<f64> {
            let name = TRACE_HEADER[c];
            let raw = record.get(columns[c]).ok_or_else(|| Error::InvalidValue {
                row,
                column: name.into(),
                message: "missing field".into(),
            })?;
            raw.parse::<f64>().map_err(|e| Error::InvalidValue {
                row,
                column: name.into(),
                message: e.to_string(),
            })
        };
        points.push(TracePoint {
            t: field(0)?,
            k_raw_sq: field(1)?,
            mean_intensity: field(2)?,
        });
    }
    validate_points(&points)?;

    let rate = match sampling_rate_hz {
        Some(rate) => rate,
        None if points.len() >= 2 => {
            let span = points[points.len() - 1].t - points[0].t;
            (points.len() - 1) as f64 / span
        }
        None => {
            return Err(Error::InvalidConfig(
                "cannot infer the sampling rate from fewer than two samples".into(),
            ))
        }
    };
    let meta = TraceMeta::new(rate, points.len(), source_label)?;
    Trace::new(meta, points)
}

fn csv_error(e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::InvalidValue {
        row,
        column: String::new(),
        message: e.to_string(),
    }
}

pub fn write_trace<W: Write>(trace: &Trace, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", TRACE_HEADER.join(","))?;
    for p in trace.points() {
        writeln!(w, "{},{},{}", p.t, p.k_raw_sq, p.mean_intensity)?;
    }
    w.flush()
}

pub fn save_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace(trace, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// A stack of raw camera frames in ADU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameStack {
    width: usize,
    height: usize,
    bit_depth: u16,
    pixels: Vec<u16>,
}

impl FrameStack {
    /// `pixels` holds `n_frames * height * width` values, frame-major then row-major.
    pub fn new(width: usize, height: usize, bit_depth: u16, pixels: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig("frame dimensions must be at least 1".into()));
        }
        if !matches!(bit_depth, 8 | 10 | 12 | 16) {
            return Err(Error::InvalidConfig(format!(
                "bit depth must be one of 8, 10, 12, 16; got {bit_depth}"
            )));
        }
        let frame_len = width * height;
        if pixels.is_empty() || !pixels.len().is_multiple_of(frame_len) {
            return Err(Error::InvalidConfig(format!(
                "{} pixels do not form whole {width}x{height} frames",
                pixels.len()
            )));
        }
        if bit_depth < 16 {
            let limit = 1u32 << bit_depth;
            if let Some(pos) = pixels.iter().position(|&v| u32::from(v) >= limit) {
                return Err(Error::PixelOutOfRange {
                    frame: pos / frame_len,
                    index: pos % frame_len,
                    value: pixels[pos],
                    bit_depth,
                });
            }
        }
        Ok(Self {
            width,
            height,
            bit_depth,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bit_depth(&self) -> u16 {
        self.bit_depth
    }

    pub fn n_frames(&self) -> usize {
        self.pixels.len() / (self.width * self.height)
    }

    pub fn frame(&self, index: usize) -> &[u16] {
        let len = self.width * self.height;
        &self.pixels[index * len..(index + 1) * len]
    }

    pub fn frames(&self) -> impl ExactSizeIterator<Item = &[u16]> {
        self.pixels.chunks_exact(self.width * self.height)
    }
}

pub fn load_frame_stack(path: impl AsRef<Path>) -> Result<FrameStack> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_frame_stack(&bytes)
}

pub fn decode_frame_stack(bytes: &[u8]) -> Result<FrameStack> {
    if bytes.len() < 4 || &bytes[..4] != FRAME_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(Error::TruncatedFile {
            expected: FRAME_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u16_at(4);
    if version != FRAME_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let width = u32_at(6) as usize;
    let height = u32_at(10) as usize;
    let n_frames = u32_at(14) as usize;
    let bit_depth = u16_at(18);
    if n_frames == 0 {
        return Err(Error::InvalidConfig("frame stack declares zero frames".into()));
    }

    let payload = &bytes[FRAME_HEADER_LEN..];
    let expected = n_frames * width * height * 2;
    if payload.len() < expected {
        return Err(Error::TruncatedFile {
            expected,
            found: payload.len(),
        });
    }
    let pixels = payload[..expected]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    FrameStack::new(width, height, bit_depth, pixels)
}

pub(crate) fn write_frame_header<W: Write>(
    w: &mut W,
    width: usize,
    height: usize,
    n_frames: usize,
    bit_depth: u16,
) -> std::io::Result<()> {
    w.write_all(FRAME_MAGIC)?;
    w.write_all(&FRAME_VERSION.to_le_bytes())?;
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&(height as u32).to_le_bytes())?;
    w.write_all(&(n_frames as u32).to_le_bytes())?;
    w.write_all(&bit_depth.to_le_bytes())
}

pub(crate) fn write_pixels<W: Write>(w: &mut W, pixels: &[u16]) -> std::io::Result<()> {
    let bytes: Vec<u8> = pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
    w.write_all(&bytes)
}

pub fn write_frame_stack<W: Write>(stack: &FrameStack, mut w: W) -> std::io::Result<()> {
    write_frame_header(&mut w, stack.width, stack.height, stack.n_frames(), stack.bit_depth)?;
    write_pixels(&mut w, &stack.pixels)?;
    w.flush()
}

pub fn save_frame_stack(stack: &FrameStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_frame_stack(stack, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(csv: &str) -> Result<Trace> {
        read_trace(csv.as_bytes(), None, "test")
    }

    #[test]
    fn reads_three_rows() {
        let trace = parse("t,k_raw_sq,mean_intensity\n0,0.1,100\n0.02,0.11,101\n0.04,0.12,99\n").unwrap();
        assert_eq!(trace.len(), 3);
        assert!((trace.sampling_rate_hz() - 50.0).abs() < 1e-9);
        assert_eq!(trace.points()[1].k_raw_sq, 0.11);
    }

    #[test]
    fn column_order_is_free() {
        let trace = parse("mean_intensity,t,k_raw_sq\n100,0,0.1\n101,0.5,0.2\n").unwrap();
        assert_eq!(trace.points()[1].mean_intensity, 101.0);
        assert_eq!(trace.points()[1].t, 0.5);
    }

    #[test]
    fn zero_intensity_is_rejected_with_row() {
        let err = parse("t,k_raw_sq,mean_intensity\n0,0.1,100\n0.02,0.1,0\n0.04,0.1,100\n").unwrap_err();
        assert!(matches!(err, Error::NonPositiveIntensity { row: 2 }), "{err:?}");
    }

    #[test]
    fn backwards_time_is_rejected_with_row() {
        let err = parse("t,k_raw_sq,mean_intensity\n0,0.1,100\n0.02,0.1,100\n0.01,0.1,100\n").unwrap_err();
        assert!(matches!(err, Error::NonMonotonicTime { row: 3 }), "{err:?}");
    }

    #[test]
    fn missing_column() {
        let err = parse("t,k_raw_sq\n0,0.1\n").unwrap_err();
        assert!(matches!(err, Error::MissingColumn { ref column } if column == "mean_intensity"));
    }

    #[test]
    fn irregular_spacing() {
        let err = parse("t,k_raw_sq,mean_intensity\n0,0.1,1\n0.1,0.1,1\n0.25,0.1,1\n0.3,0.1,1\n").unwrap_err();
        assert!(matches!(err, Error::IrregularSampling { .. }), "{err:?}");
    }

    #[test]
    fn unparseable_value_names_row() {
        let err = parse("t,k_raw_sq,mean_intensity\n0,0.1,1\n0.1,abc,1\n").unwrap_err();
        assert!(matches!(err, Error::InvalidValue { row: 2, ref column, .. } if column == "k_raw_sq"));
    }

    #[test]
    fn empty_trace_writes_header_only() {
        let trace = Trace::from_samples(60.0, &[], &[], "empty").unwrap();
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,k_raw_sq,mean_intensity\n");
        let back = read_trace(&b"t,k_raw_sq,mean_intensity\n"[..], Some(60.0), "empty").unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn twenty_seconds_at_sixty_hz_is_1201_lines() {
        let k = vec![0.05; 1200];
        let i = vec![100.0; 1200];
        let trace = Trace::from_samples(60.0, &k, &i, "x").unwrap();
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1201);
        assert!(!text.contains('\r'));
    }

    #[test]
    fn signal_level_from_gain() {
        let trace = Trace::from_samples(10.0, &[0.1, 0.1], &[90.0, 110.0], "x")
            .unwrap()
            .with_gain(2.0)
            .unwrap();
        assert_eq!(trace.meta().signal_level_e_per_px, Some(50.0));
    }

    #[test]
    fn frame_stack_round_trip() {
        let stack = FrameStack::new(2, 2, 16, vec![1, 2, 3, 4]).unwrap();
        let mut buf = Vec::new();
        write_frame_stack(&stack, &mut buf).unwrap();
        assert_eq!(buf.len(), 20 + 8);
        assert_eq!(decode_frame_stack(&buf).unwrap(), stack);
    }

    #[test]
    fn frame_stack_bad_magic() {
        let stack = FrameStack::new(2, 2, 16, vec![1, 2, 3, 4]).unwrap();
        let mut buf = Vec::new();
        write_frame_stack(&stack, &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(decode_frame_stack(&buf), Err(Error::BadMagic)));
    }

    #[test]
    fn frame_stack_truncated() {
        let stack = FrameStack::new(2, 1, 16, vec![7; 20]).unwrap();
        assert_eq!(stack.n_frames(), 10);
        let mut buf = Vec::new();
        write_frame_stack(&stack, &mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(matches!(
            decode_frame_stack(&buf),
            Err(Error::TruncatedFile {
                expected: 40,
                found: 36
            })
        ));
    }

    #[test]
    fn frame_stack_pixel_range() {
        let mut buf = Vec::new();
        write_frame_stack(&FrameStack::new(2, 1, 16, vec![5, 300]).unwrap(), &mut buf).unwrap();
        buf[18] = 8;
        assert!(matches!(
            decode_frame_stack(&buf),
            Err(Error::PixelOutOfRange {
                frame: 0,
                index: 1,
                value: 300,
                bit_depth: 8
            })
        ));
    }
}

//! Minimal SVG line and scatter plots.

use std::fmt::Write as _;

const PANEL_W: f64 = 520.0;
const PANEL_H: f64 = 360.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 52.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    Line,
    Dots,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub color: &'static str,
    pub mark: Mark,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, color: &'static str, mark: Mark, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            color,
            mark,
            points,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = if log { v.log10() } else { v };
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let pad = if log { 0.03 } else { 0.05 } * (hi - lo);
        Self {
            lo: lo - pad,
            hi: hi + pad,
            log,
        }
    }

    fn unit(&self, v: f64) -> Option<f64> {
        let v = if self.log { v.log10() } else { v };
        v.is_finite().then(|| (v - self.lo) / (self.hi - self.lo))
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let mut out = Vec::new();
            for decade in self.lo.floor() as i32..=self.hi.ceil() as i32 {
                for m in [1.0, 2.0, 5.0] {
                    let v = m * 10f64.powi(decade);
                    let l = v.log10();
                    if l >= self.lo && l <= self.hi {
                        out.push(v);
                    }
                }
            }
            return out;
        }
        let raw = (self.hi - self.lo) / 6.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0]
            .iter()
            .map(|m| m * mag)
            .find(|s| *s >= raw)
            .unwrap_or(10.0 * mag);
        let first = (self.lo / step).ceil() as i64;
        let last = (self.hi / step).floor() as i64;
        (first..=last).map(|k| k as f64 * step).collect()
    }
}

fn label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:.0e}");
    }
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn draw_panel(out: &mut String, p: &Panel, x0: f64) {
    let all = || p.series.iter().flat_map(|s| s.points.iter());
    let ax = Axis::fit(all().map(|q| q.0), p.log_x);
    let ay = Axis::fit(all().map(|q| q.1), false);
    let (pw, ph) = (PANEL_W - MARGIN_L - MARGIN_R, PANEL_H - MARGIN_T - MARGIN_B);
    let (left, top) = (x0 + MARGIN_L, MARGIN_T);
    let px = |u: f64| left + u * pw;
    let py = |u: f64| top + (1.0 - u) * ph;

    let _ = writeln!(
        out,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(&p.title)
    );
    for t in ax.ticks() {
        if let Some(u) = ax.unit(t) {
            let x = px(u);
            let _ = writeln!(
                out,
                r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#444"/><text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"##,
                top + ph,
                top + ph + 5.0,
                top + ph + 18.0,
                label(t)
            );
        }
    }
    for t in ay.ticks() {
        if let Some(u) = ay.unit(t) {
            let y = py(u);
            let _ = writeln!(
                out,
                r##"<line x1="{:.1}" y1="{y:.1}" x2="{left:.1}" y2="{y:.1}" stroke="#444"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"##,
                left - 5.0,
                left - 8.0,
                y + 4.0,
                label(t)
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#,
        left + pw / 2.0,
        PANEL_H - 12.0,
        escape(&p.x_label)
    );
    let (yx, yy) = (x0 + 16.0, top + ph / 2.0);
    let _ = writeln!(
        out,
        r#"<text x="{yx:.1}" y="{yy:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 {yx:.1} {yy:.1})">{}</text>"#,
        escape(&p.y_label)
    );

    for s in &p.series {
        let mapped: Vec<(f64, f64)> = s
            .points
            .iter()
            .filter_map(|&(x, y)| Some((px(ax.unit(x)?), py(ay.unit(y)?))))
            .collect();
        match s.mark {
            Mark::Line => {
                let mut d = String::new();
                for (x, y) in &mapped {
                    let _ = write!(d, "{x:.2},{y:.2} ");
                }
                let _ = writeln!(
                    out,
                    r#"<polyline fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#,
                    s.color,
                    d.trim_end()
                );
            }
            Mark::Dots => {
                for (x, y) in &mapped {
                    let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{}"/>"#, s.color);
                }
            }
        }
    }
    for (j, s) in p.series.iter().enumerate() {
        let y = top + 14.0 + 15.0 * j as f64;
        let x = left + pw - 150.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            y - 9.0,
            s.color,
            x + 14.0,
            y,
            escape(&s.name)
        );
    }
}

/// Panels side by side in one document.
pub fn render(panels: &[Panel]) -> String {
    let width = PANEL_W * panels.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" viewBox="0 0 {width:.0} {PANEL_H:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, "<!-- {} {} -->", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (j, p) in panels.iter().enumerate() {
        draw_panel(&mut out, p, PANEL_W * j as f64);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_ticks_are_round() {
        let a = Axis {
            lo: -0.13,
            hi: 0.92,
            log: false,
        };
        let labels: Vec<String> = a.ticks().into_iter().map(label).collect();
        assert_eq!(labels, ["0", "0.2", "0.4", "0.6", "0.8"]);
    }

    #[test]
    fn log_ticks_cover_range() {
        let a = Axis {
            lo: 20f64.log10(),
            hi: 500f64.log10(),
            log: true,
        };
        assert_eq!(a.ticks(), vec![20.0, 50.0, 100.0, 200.0, 500.0]);
    }

    #[test]
    fn render_skips_non_finite_points() {
        let p = Panel {
            title: "a < b".into(),
            log_x: true,
            series: vec![Series::new(
                "s",
                "red",
                Mark::Dots,
                vec![(10.0, 1.0), (f64::NAN, 2.0), (-1.0, 3.0), (100.0, 2.0)],
            )],
            ..Default::default()
        };
        let svg = render(&[p]);
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("a &lt; b"));
        assert!(svg.ends_with("</svg>\n"));
    }
}

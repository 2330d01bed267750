//! Minimal SVG line and bar overlays for exported figures.

use std::fmt::Write as _;

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 300.0;
const MARGIN: f64 = 30.0;

pub const BLACK: &str = "#000000";
pub const BLUE: &str = "#1f4fd1";
pub const RED: &str = "#d11f1f";

enum Layer {
    Line { points: Vec<(f64, f64)>, color: String },
    Bars { values: Vec<(f64, f64)>, color: String },
}

/// A single panel with a shared x axis. Lines use the data y range; bars
/// span the full panel height with opacity proportional to their weight.
pub struct Figure {
    title: String,
    layers: Vec<Layer>,
}

impl Figure {
    pub fn new(title: impl Into<String>) -> Self {
        Self { title: title.into(), layers: Vec::new() }
    }

    pub fn line(mut self, points: Vec<(f64, f64)>, color: &str) -> Self {
        self.layers.push(Layer::Line { points, color: color.to_string() });
        self
    }

    /// `(x, weight)` pairs; weights are scaled by the largest one.
    pub fn bars(mut self, values: Vec<(f64, f64)>, color: &str) -> Self {
        self.layers.push(Layer::Bars { values, color: color.to_string() });
        self
    }

    fn x_range(&self) -> (f64, f64) {
        let xs = self.layers.iter().flat_map(|l| match l {
            Layer::Line { points, .. } => points.iter(),
            Layer::Bars { values, .. } => values.iter(),
        });
        range(xs.map(|p| p.0))
    }

    fn y_range(&self) -> (f64, f64) {
        let ys = self.layers.iter().flat_map(|l| match l {
            Layer::Line { points, .. } => points.as_slice(),
            Layer::Bars { .. } => &[],
        });
        range(ys.map(|p| p.1))
    }

    pub fn to_svg(&self) -> String {
        let (x0, x1) = self.x_range();
        let (y0, y1) = self.y_range();
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{MARGIN}" y="18" font-family="sans-serif" font-size="13">{}</text>"#, escape(&self.title));
        let bar_width = self.bar_width(x1 - x0);
        for layer in &self.layers {
            match layer {
                Layer::Bars { values, color } => {
                    let top = values.iter().map(|v| v.1).fold(0.0, f64::max);
                    if top <= 0.0 {
                        continue;
                    }
                    for &(x, w) in values.iter().filter(|v| v.1 > 0.0) {
                        let _ = writeln!(
                            s,
                            r#"<rect x="{:.2}" y="{MARGIN}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="{:.3}"/>"#,
                            sx(x) - bar_width / 2.0,
                            bar_width,
                            HEIGHT - 2.0 * MARGIN,
                            0.8 * w / top
                        );
                    }
                }
                Layer::Line { points, color } => {
                    let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                        path.join(" ")
                    );
                }
            }
        }
        s.push_str("</svg>\n");
        s
    }

    fn bar_width(&self, span: f64) -> f64 {
        let n = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Bars { values, .. } => values.len(),
                Layer::Line { .. } => 0,
            })
            .max()
            .unwrap_or(0);
        if n == 0 || span <= 0.0 {
            1.0
        } else {
            ((WIDTH - 2.0 * MARGIN) / n as f64).max(1.0)
        }
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi == lo {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_layers() {
        let svg = Figure::new("a < b")
            .bars(vec![(0.0, 0.0), (1.0, 2.0), (2.0, 1.0)], RED)
            .line(vec![(0.0, 1.0), (2.0, 3.0)], BLACK)
            .to_svg();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<rect").count(), 3);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("a &lt; b"));
        assert!(svg.contains(r#"fill-opacity="0.800""#));
    }

    #[test]
    fn flat_line_does_not_divide_by_zero() {
        let svg = Figure::new("flat").line(vec![(0.0, 1.0), (1.0, 1.0)], BLUE).to_svg();
        assert!(!svg.contains("NaN"));
    }
}

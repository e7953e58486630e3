//! Just enough SVG for arrow fields and trajectories.

use std::fmt::Write;

/// Plot in data coordinates over `[lo, hi]^2`, mapped onto a square canvas.
#[derive(Debug, Clone)]
pub struct Plot {
    lo: f64,
    hi: f64,
    size: f64,
    margin: f64,
    body: String,
}

impl Plot {
    pub fn new(lo: f64, hi: f64, size: f64) -> Self {
        let mut p = Self {
            lo,
            hi,
            size,
            margin: 24.0,
            body: String::new(),
        };
        p.axes();
        p
    }

    fn x(&self, v: f64) -> f64 {
        self.margin + (v - self.lo) / (self.hi - self.lo) * (self.size - 2.0 * self.margin)
    }

    fn y(&self, v: f64) -> f64 {
        self.size
            - self.margin
            - (v - self.lo) / (self.hi - self.lo) * (self.size - 2.0 * self.margin)
    }

    fn axes(&mut self) {
        let (a, b) = (self.x(self.lo), self.x(self.hi));
        let (c, d) = (self.y(self.lo), self.y(self.hi));
        let _ = writeln!(
            self.body,
            r##"<rect x="{a:.2}" y="{d:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#888"/>"##,
            b - a,
            c - d
        );
        if self.lo < 0.0 && self.hi > 0.0 {
            let (x0, y0) = (self.x(0.0), self.y(0.0));
            let _ = writeln!(
                self.body,
                r##"<line x1="{a:.2}" y1="{y0:.2}" x2="{b:.2}" y2="{y0:.2}" stroke="#ccc"/>"##
            );
            let _ = writeln!(
                self.body,
                r##"<line x1="{x0:.2}" y1="{d:.2}" x2="{x0:.2}" y2="{c:.2}" stroke="#ccc"/>"##
            );
        }
    }

    /// Arrow from `(x, y)` along `(dx, dy)`, both in data units.
    pub fn arrow(&mut self, x: f64, y: f64, dx: f64, dy: f64, colour: &str) {
        let (x1, y1) = (self.x(x), self.y(y));
        let (x2, y2) = (self.x(x + dx), self.y(y + dy));
        let len = ((x2 - x1).powi(2) + (y2 - y1).powi(2)).sqrt();
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{colour}" stroke-width="1"/>"#
        );
        if len > 1e-9 {
            let (ux, uy) = ((x2 - x1) / len, (y2 - y1) / len);
            let h = (0.35 * len).min(4.0);
            let (lx, ly) = (x2 - h * (ux + 0.5 * uy), y2 - h * (uy - 0.5 * ux));
            let (rx, ry) = (x2 - h * (ux - 0.5 * uy), y2 - h * (uy + 0.5 * ux));
            let _ = writeln!(
                self.body,
                r#"<polygon points="{x2:.2},{y2:.2} {lx:.2},{ly:.2} {rx:.2},{ry:.2}" fill="{colour}"/>"#
            );
        }
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], colour: &str) {
        let pts: Vec<String> = points
            .iter()
            .map(|&(a, b)| format!("{:.2},{:.2}", self.x(a), self.y(b)))
            .collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
    }

    pub fn circle(&mut self, x: f64, y: f64, r: f64, colour: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{colour}"/>"#,
            self.x(x),
            self.y(y)
        );
    }

    /// Text anchored at a canvas position in pixels.
    pub fn label(&mut self, px: f64, py: f64, text: &str) {
        let text = text
            .replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;");
        let _ = writeln!(
            self.body,
            r#"<text x="{px:.2}" y="{py:.2}" font-family="sans-serif" font-size="12">{text}</text>"#
        );
    }

    pub fn render(&self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" viewBox=\"0 0 {s} {s}\">\n{}</svg>\n",
            self.body,
            s = self.size
        )
    }
}

/// Panels placed side by side.
pub fn row(panels: &[Plot]) -> String {
    let w: f64 = panels.iter().map(|p| p.size).sum();
    let h = panels.iter().map(|p| p.size).fold(0.0, f64::max);
    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
    let mut x = 0.0;
    for p in panels {
        let _ = writeln!(out, "<g transform=\"translate({x} 0)\">\n{}</g>", p.body);
        x += p.size;
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corners_map_inside_the_margin() {
        let p = Plot::new(-2.0, 2.0, 200.0);
        assert_eq!(p.x(-2.0), 24.0);
        assert_eq!(p.x(2.0), 176.0);
        assert_eq!(p.y(2.0), 24.0);
    }

    #[test]
    fn document_is_closed_and_escaped() {
        let mut p = Plot::new(0.0, 1.0, 100.0);
        p.arrow(0.5, 0.5, 0.1, 0.0, "black");
        p.label(5.0, 10.0, "a<b");
        let s = p.render();
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(s.contains("a&lt;b"));
        assert!(row(&[p.clone(), p]).matches("<g ").count() == 2);
    }
}

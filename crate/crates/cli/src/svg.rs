//! Minimal SVG line/band plots.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// One panel: observed points, a median line and a shaded band.
#[derive(Debug, Default)]
pub struct Plot {
    pub title: String,
    pub points: Vec<(f64, f64)>,
    pub line: Vec<(f64, f64)>,
    /// `(x, lower, upper)`
    pub band: Vec<(f64, f64, f64)>,
}

impl Plot {
    fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let xs = self
            .points
            .iter()
            .map(|p| p.0)
            .chain(self.line.iter().map(|p| p.0))
            .chain(self.band.iter().map(|b| b.0));
        let ys = self
            .points
            .iter()
            .map(|p| p.1)
            .chain(self.line.iter().map(|p| p.1))
            .chain(self.band.iter().flat_map(|b| [b.1, b.2]));
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for x in xs.filter(|v| v.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
        for y in ys.filter(|v| v.is_finite()) {
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !(x0.is_finite() && y0.is_finite()) {
            return None;
        }
        if x1 == x0 {
            x1 = x0 + 1.0;
        }
        if y1 == y0 {
            y1 = y0 + 1.0;
        }
        let pad = 0.05 * (y1 - y0);
        Some((x0, x1, y0 - pad, y1 + pad))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let Some((x0, x1, y0, y1)) = self.bounds() else {
            s.push_str("</svg>\n");
            return s;
        };
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

        // axes
        let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(
            s,
            r#"<path d="M{left},{top} L{left},{bottom} L{right},{bottom}" fill="none" stroke="black"/>"#
        );
        for (v, y) in [(y0, bottom), (y1, top)] {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.1}</text>"#,
                left - 4.0,
                y + 4.0
            );
        }
        for (v, x) in [(x0, left), (x1, right)] {
            let _ = writeln!(
                s,
                r#"<text x="{x:.1}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{v}</text>"#,
                bottom + 16.0
            );
        }

        let band: Vec<_> = self
            .band
            .iter()
            .filter(|b| b.0.is_finite() && b.1.is_finite() && b.2.is_finite())
            .collect();
        if !band.is_empty() {
            let mut d = String::new();
            for (i, b) in band.iter().enumerate() {
                let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, sx(b.0), sy(b.2));
            }
            for b in band.iter().rev() {
                let _ = write!(d, "L{:.2},{:.2} ", sx(b.0), sy(b.1));
            }
            let _ = writeln!(s, r##"<path d="{}Z" fill="#4a7ab5" fill-opacity="0.3" stroke="none"/>"##, d);
        }
        let line: Vec<_> = self.line.iter().filter(|p| p.1.is_finite()).collect();
        if !line.is_empty() {
            let pts: Vec<String> = line.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
            let _ = writeln!(
                s,
                r##"<polyline points="{}" fill="none" stroke="#1f4e8c" stroke-width="2"/>"##,
                pts.join(" ")
            );
        }
        for p in self.points.iter().filter(|p| p.1.is_finite()) {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="black"/>"#,
                sx(p.0),
                sy(p.1)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// File-system safe stem for a country code.
pub fn file_stem(code: &str) -> String {
    code.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

//! Minimal hand-written SVG plots. Coordinates are printed with fixed
//! precision so identical data gives identical bytes.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 50.0;

pub const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Axes with a linear data-to-pixel mapping.
pub struct Plot {
    body: String,
    x: (f64, f64),
    y: (f64, f64),
}

impl Plot {
    pub fn new(title: &str, xlabel: &str, ylabel: &str, x: (f64, f64), y: (f64, f64)) -> Self {
        let mut p = Self { body: String::new(), x: widen(x), y: widen(y) };
        let (x0, y0, x1, y1) = (LEFT, TOP, W - RIGHT, H - BOTTOM);
        let _ = write!(
            p.body,
            r##"<rect x="{x0}" y="{y0}" width="{:.1}" height="{:.1}" fill="none" stroke="#333"/>"##,
            x1 - x0,
            y1 - y0
        );
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let vx = p.x.0 + t * (p.x.1 - p.x.0);
            let vy = p.y.0 + t * (p.y.1 - p.y.0);
            let (px, py) = (p.px(vx), p.py(vy));
            let _ = write!(
                p.body,
                r##"<text x="{px:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"##,
                y1 + 14.0,
                tick(vx),
                x0 - 4.0,
                py + 3.0,
                tick(vy)
            );
        }
        let _ = write!(
            p.body,
            r##"<text x="{:.1}" y="22" font-size="14" text-anchor="middle">{}</text><text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text><text x="14" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"##,
            W / 2.0,
            escape(title),
            (x0 + x1) / 2.0,
            H - 12.0,
            escape(xlabel),
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(ylabel)
        );
        p
    }

    fn px(&self, v: f64) -> f64 {
        LEFT + (v - self.x.0) / (self.x.1 - self.x.0) * (W - RIGHT - LEFT)
    }

    fn py(&self, v: f64) -> f64 {
        H - BOTTOM - (v - self.y.0) / (self.y.1 - self.y.0) * (H - BOTTOM - TOP)
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], color: &str, dashed: bool) {
        let pts: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect();
        let dash = if dashed { r#" stroke-dasharray="5,4""# } else { "" };
        let _ = write!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            pts.join(" ")
        );
    }

    pub fn points(&mut self, points: &[(f64, f64)], color: &str) {
        for &(x, y) in points {
            let _ = write!(
                self.body,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}" fill-opacity="0.6"/>"#,
                self.px(x),
                self.py(y)
            );
        }
    }

    pub fn hline(&mut self, y: f64, color: &str, label: &str) {
        self.polyline(&[(self.x.0, y), (self.x.1, y)], color, true);
        let _ = write!(
            self.body,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end" fill="{color}">{}</text>"#,
            W - RIGHT - 4.0,
            self.py(y) - 3.0,
            escape(label)
        );
    }

    pub fn legend(&mut self, entries: &[(&str, &str)]) {
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = TOP + 14.0 + 14.0 * i as f64;
            let _ = write!(
                self.body,
                r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}" font-size="10">{}</text>"#,
                W - RIGHT - 120.0,
                y - 9.0,
                W - RIGHT - 106.0,
                y,
                escape(label)
            );
        }
    }

    pub fn finish(self) -> String {
        document(W, H, &self.body)
    }
}

fn document(w: f64, h: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}\n</svg>\n"
    )
}

fn widen((lo, hi): (f64, f64)) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 1.0, lo + 1.0)
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Padded `(min, max)` over values.
pub fn range(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.into_iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = 0.05 * (hi - lo).max(1e-9);
    (lo - pad, hi + pad)
}

/// Vertical bars with their values printed above.
pub fn bar_chart(title: &str, ylabel: &str, bars: &[(String, f64)]) -> String {
    let top = bars.iter().map(|b| b.1).fold(0.0, f64::max).max(1e-9) * 1.15;
    let mut p = Plot::new(title, "", ylabel, (0.0, bars.len() as f64), (0.0, top));
    for (i, (label, v)) in bars.iter().enumerate() {
        let (x0, x1) = (p.px(i as f64 + 0.15), p.px(i as f64 + 0.85));
        let (y0, y1) = (p.py(*v), p.py(0.0));
        let _ = write!(
            p.body,
            r#"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="{}"/><text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{v:.3}</text><text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"#,
            x1 - x0,
            y1 - y0,
            PALETTE[i % PALETTE.len()],
            (x0 + x1) / 2.0,
            y0 - 4.0,
            (x0 + x1) / 2.0,
            y1 + 28.0,
            escape(label)
        );
    }
    p.finish()
}

/// Plain table; `rows` are already formatted cells.
pub fn table(title: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let (cw, rh) = (110.0, 22.0);
    let w = cw * header.len() as f64 + 20.0;
    let h = rh * (rows.len() + 1) as f64 + 50.0;
    let mut body = format!(r#"<text x="10" y="22" font-size="14">{}</text>"#, escape(title));
    let all = std::iter::once(header.iter().map(|s| s.to_string()).collect::<Vec<_>>()).chain(rows.iter().cloned());
    for (r, row) in all.enumerate() {
        let y = 40.0 + rh * r as f64;
        let weight = if r == 0 { "bold" } else { "normal" };
        let _ = write!(body, r##"<line x1="10" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#999"/>"##, y + rh, w - 10.0, y + rh);
        for (c, cell) in row.iter().enumerate() {
            let _ = write!(
                body,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" font-weight="{weight}">{}</text>"#,
                14.0 + cw * c as f64,
                y + 15.0,
                escape(cell)
            );
        }
    }
    document(w, h, &body)
}

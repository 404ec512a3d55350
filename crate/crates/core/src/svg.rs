//! Minimal SVG line charts and histograms for the report artifacts.

use std::fmt::Write;

use crate::fmt::sig;

const W: f64 = 720.0;
const H: f64 = 420.0;
const PAD_L: f64 = 64.0;
const PAD_R: f64 = 16.0;
const PAD_T: f64 = 36.0;
const PAD_B: f64 = 48.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#17becf"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: Option<String>,
    pub width: f64,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { label: label.into(), points, color: None, width: 1.5 }
    }

    pub fn styled(mut self, color: &str, width: f64) -> Self {
        self.color = Some(color.to_string());
        self.width = width;
        self
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let (mut x0, mut x1) = bounds(xs);
        let (mut y0, mut y1) = bounds(ys);
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD_L + (x - self.x0) / (self.x1 - self.x0) * (W - PAD_L - PAD_R)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD_B - (y - self.y0) / (self.y1 - self.y0) * (H - PAD_T - PAD_B)
    }
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

fn header(out: &mut String, title: &str, f: &Frame, xlabel: &str, ylabel: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>
"#,
        W / 2.0,
        escape(title)
    );
    let (l, r, t, b) = (PAD_L, W - PAD_R, PAD_T, H - PAD_B);
    let _ = writeln!(out, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#, r - l, b - t);
    for i in 0..=4 {
        let fx = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let fy = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, f.px(fx), b + 16.0, sig(fx, 4));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, l - 4.0, f.py(fy) + 4.0, sig(fy, 4));
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (l + r) / 2.0, H - 10.0, escape(xlabel));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (t + b) / 2.0,
        (t + b) / 2.0,
        escape(ylabel)
    );
}

fn legend(out: &mut String, entries: &[(String, String)]) {
    for (i, (label, color)) in entries.iter().enumerate() {
        let y = PAD_T + 14.0 + 16.0 * i as f64;
        let x = W - PAD_R - 150.0;
        let _ = writeln!(out, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="3"/>"#, x + 18.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 24.0, y + 4.0, escape(label));
    }
}

/// A line chart; series with an empty label are left out of the legend.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let f = Frame::new(xs, ys);
    let mut out = String::new();
    header(&mut out, title, &f, xlabel, ylabel);
    let mut entries = Vec::new();
    for (i, s) in series.iter().enumerate() {
        let color = s.color.clone().unwrap_or_else(|| PALETTE[i % PALETTE.len()].to_string());
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="{}" points="{}"/>"#,
            s.width,
            pts.join(" ")
        );
        if !s.label.is_empty() {
            entries.push((s.label.clone(), color));
        }
    }
    legend(&mut out, &entries);
    out.push_str("</svg>\n");
    out
}

/// Overlaid histograms of several samples on shared bins.
pub fn histogram(title: &str, xlabel: &str, samples: &[(&str, &[f64])], bins: usize) -> String {
    let bins = bins.max(1);
    let (lo, hi) = bounds(samples.iter().flat_map(|(_, v)| v.iter().copied()));
    let (lo, hi) = if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let width = (hi - lo) / bins as f64;
    let counts: Vec<Vec<f64>> = samples
        .iter()
        .map(|(_, v)| {
            let mut c = vec![0.0; bins];
            for &x in v.iter().filter(|x| x.is_finite()) {
                let k = (((x - lo) / width) as usize).min(bins - 1);
                c[k] += 1.0 / v.len() as f64;
            }
            c
        })
        .collect();
    let ymax = counts.iter().flatten().copied().fold(0.0, f64::max);
    let f = Frame::new([lo, hi].into_iter(), [0.0, ymax].into_iter());
    let mut out = String::new();
    header(&mut out, title, &f, xlabel, "fraction");
    let mut entries = Vec::new();
    for (i, ((label, _), c)) in samples.iter().zip(&counts).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for (k, &h) in c.iter().enumerate() {
            if h <= 0.0 {
                continue;
            }
            let x = f.px(lo + k as f64 * width);
            let w = f.px(lo + (k + 1) as f64 * width) - x;
            let y = f.py(h);
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{:.2}" fill="{color}" fill-opacity="0.45" stroke="{color}"/>"#,
                f.py(0.0) - y
            );
        }
        entries.push((label.to_string(), color.to_string()));
    }
    legend(&mut out, &entries);
    out.push_str("</svg>\n");
    out
}

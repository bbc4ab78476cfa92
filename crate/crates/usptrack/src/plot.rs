//! Drift-curve files and their SVG rendering.
//!
//! A curve file is tab-separated with a `# USPCURVE 1 <label>` first line,
//! then `frame mean p10 p90 count` rows. Frames without samples hold `NaN`.

use std::fmt::Write as _;
use std::path::Path;

use usptrack_core::eval::DriftCurve;
use usptrack_core::{Error, Result};

use crate::formats::{read_text, write_text};

pub const CURVE_MAGIC: &str = "# USPCURVE 1";
const HEADER: &str = "frame\tmean\tp10\tp90\tcount";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCurve {
    pub label: String,
    pub curve: DriftCurve,
}

pub fn format_curve(label: &str, curve: &DriftCurve) -> String {
    let mut s = format!("{CURVE_MAGIC} {label}\n{HEADER}\n");
    for f in 0..curve.len() {
        let _ = writeln!(s, "{f}\t{:?}\t{:?}\t{:?}\t{}", curve.mean[f], curve.p10[f], curve.p90[f], curve.count[f]);
    }
    s
}

pub fn parse_curve(text: &str, origin: &str) -> Result<LabeledCurve> {
    let mut lines = text.lines();
    let label = lines
        .next()
        .and_then(|l| l.strip_prefix(CURVE_MAGIC))
        .map(|l| l.trim().to_string())
        .ok_or_else(|| Error::Format(format!("{origin}: expected `{CURVE_MAGIC} <label>` first line")))?;
    if lines.next().map(str::trim) != Some(HEADER) {
        return Err(Error::Format(format!("{origin}: expected column header `{HEADER}`")));
    }
    let mut curve = DriftCurve { mean: vec![], p10: vec![], p90: vec![], count: vec![] };
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Format(format!("{origin}:{}: malformed curve row", k + 3));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 || cols[0].parse::<usize>().ok() != Some(curve.len()) {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        curve.mean.push(num(cols[1])?);
        curve.p10.push(num(cols[2])?);
        curve.p90.push(num(cols[3])?);
        curve.count.push(cols[4].parse().map_err(|_| bad())?);
    }
    Ok(LabeledCurve { label, curve })
}

pub fn save_curve(path: &Path, label: &str, curve: &DriftCurve) -> Result<()> {
    write_text(path, &format_curve(label, curve))
}

pub fn load_curve(path: &Path) -> Result<LabeledCurve> {
    parse_curve(&read_text(path)?, &path.display().to_string())
}

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Mean lines over shaded p10–p90 bands, one colour per curve.
pub fn render_svg(curves: &[LabeledCurve], title: &str) -> String {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let frames = curves.iter().map(|c| c.curve.len()).max().unwrap_or(1).max(2);
    let ymax = curves
        .iter()
        .flat_map(|c| c.curve.p90.iter().chain(&c.curve.mean))
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0_f64, f64::max)
        .max(1e-9)
        * 1.05;
    let sx = |f: usize| left + pw * f as f64 / (frames - 1) as f64;
    let sy = |v: f64| top + ph * (1.0 - v / ymax);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(s, r##"<line x1="{left}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/>"##, left + pw);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, left - 6.0, y + 4.0);
    }
    let step = ((frames - 1) / 8).max(1);
    for f in (0..frames).step_by(step) {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{f}</text>"#, sx(f), top + ph + 18.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">frame</text>"#, left + pw / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">L2 error (px)</text>"#, top + ph / 2.0, top + ph / 2.0);
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);

    for (ci, c) in curves.iter().enumerate() {
        let colour = PALETTE[ci % PALETTE.len()];
        let d = &c.curve;
        let idx: Vec<usize> = (0..d.len()).filter(|&f| d.mean[f].is_finite() && d.p10[f].is_finite() && d.p90[f].is_finite()).collect();
        if idx.is_empty() {
            continue;
        }
        let mut band = String::new();
        for &f in &idx {
            let _ = write!(band, "{:.1},{:.1} ", sx(f), sy(d.p90[f]));
        }
        for &f in idx.iter().rev() {
            let _ = write!(band, "{:.1},{:.1} ", sx(f), sy(d.p10[f]));
        }
        let _ = writeln!(s, r#"<polygon points="{}" fill="{colour}" fill-opacity="0.18" stroke="none"/>"#, band.trim_end());
        let line: Vec<String> = idx.iter().map(|&f| format!("{:.1},{:.1}", sx(f), sy(d.mean[f]))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, line.join(" "));
        let ly = top + 16.0 + 20.0 * ci as f64;
        let _ = writeln!(s, r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{colour}" stroke-width="3"/>"#, left + pw + 12.0, left + pw + 36.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, left + pw + 42.0, ly + 4.0, escape(&c.label));
    }
    s.push_str("</svg>\n");
    s
}

//! Minimal SVG output: polyline curves and overlaid histograms. Every figure
//! is a pure function of `summary.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::results::SummaryRow;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (0.0f64, f64::NEG_INFINITY));
        for (px, py) in points {
            x = (x.0.min(px), x.1.max(px));
            y = (y.0.min(py), y.1.max(py));
        }
        if !x.0.is_finite() {
            x = (0.0, 1.0);
        }
        if !y.1.is_finite() || y.1 <= y.0 {
            y.1 = y.0 + 1.0;
        }
        if x.1 <= x.0 {
            x.1 = x.0 + 1.0;
        }
        Self { x, y }
    }

    fn px(&self, v: f64) -> f64 {
        MARGIN + (v - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (v - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn open(title: &str, frame: &Frame, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(title));
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(s, r#"<polyline points="{l},{t} {l},{b} {r},{b}" fill="none" stroke="black"/>"#);
    for (v, anchor, x, y) in [
        (frame.x.0, "start", l, b + 14.0),
        (frame.x.1, "end", r, b + 14.0),
    ] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.3}</text>"#);
    }
    for (v, y) in [(frame.y.0, b), (frame.y.1, t)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, l - 4.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 10.0, escape(xlabel));
    let _ = writeln!(s, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#, HEIGHT / 2.0, HEIGHT / 2.0, escape(ylabel));
    s
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="3" fill="{c}"/>"#, WIDTH - MARGIN - 110.0, y - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, WIDTH - MARGIN - 96.0, escape(name));
    }
}

pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|s| s.points.iter().copied()));
    let mut s = open(title, &frame, xlabel, ylabel);
    for (i, ser) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, pts.join(" "));
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{c}"/>"#, frame.px(x), frame.py(y));
        }
    }
    legend(&mut s, &series.iter().map(|x| x.name.as_str()).collect::<Vec<_>>());
    s + "</svg>\n"
}

/// Overlaid histograms over shared bins `(lo, hi, count)`.
pub fn histogram(title: &str, xlabel: &str, series: &[(String, Vec<(f64, f64, f64)>)]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|(_, bins)| bins.iter().flat_map(|&(lo, hi, c)| [(lo, c), (hi, c)])));
    let mut s = open(title, &frame, xlabel, "count");
    for (i, (_, bins)) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        for &(lo, hi, n) in bins {
            if n <= 0.0 {
                continue;
            }
            let (x0, x1, y) = (frame.px(lo), frame.px(hi), frame.py(n));
            let _ = writeln!(
                s,
                r#"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{c}" fill-opacity="0.45"/>"#,
                (x1 - x0).max(0.5),
                frame.py(0.0) - y
            );
        }
    }
    legend(&mut s, &series.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>());
    s + "</svg>\n"
}

/// Writes one curve per `(setting, statistic)` and one histogram per setting
/// with detection scores; returns the written paths in order.
pub fn render_summary(summary: &[SummaryRow], dir: &Path) -> Result<Vec<PathBuf>> {
    type Setting = (String, String, String, usize);
    let mut curves: BTreeMap<(Setting, String, String), BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    let mut hists: BTreeMap<Setting, BTreeMap<String, Vec<(f64, f64, f64)>>> = BTreeMap::new();
    for r in summary {
        let setting = (r.experiment.clone(), r.defense.clone(), r.scaler.clone(), r.beta);
        if let Some(edges) = r.statistic.strip_prefix("hist_log10_unscaling:") {
            let mut it = edges.split(':').filter_map(|e| e.parse::<f64>().ok());
            if let (Some(lo), Some(hi)) = (it.next(), it.next()) {
                hists.entry(setting).or_default().entry(r.mode.clone()).or_default().push((lo, hi, r.stat));
            }
            continue;
        }
        if matches!(r.statistic.as_str(), "accuracy" | "median_scaled_l2" | "success_rate") && r.param != "-" && r.stat.is_finite() {
            curves
                .entry((setting, r.statistic.clone(), r.param.clone()))
                .or_default()
                .entry(r.mode.clone())
                .or_default()
                .push((r.value, r.stat));
        }
    }
    let mut written = Vec::new();
    for (((exp, def, scaler, beta), stat, param), modes) in curves {
        let series: Vec<Series> = modes
            .into_iter()
            .map(|(name, mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series { name, points }
            })
            .collect();
        let title = format!("{exp}: {def} {scaler} β={beta}");
        let path = dir.join(format!("{exp}_{def}_{scaler}_b{beta}_{stat}.svg"));
        std::fs::write(&path, line_chart(&title, &param, &stat, &series))?;
        written.push(path);
    }
    for ((exp, def, scaler, beta), modes) in hists {
        let series: Vec<_> = modes.into_iter().collect();
        let title = format!("{exp}: unscaling score, {def} {scaler} β={beta}");
        let path = dir.join(format!("{exp}_{def}_{scaler}_b{beta}_hist.svg"));
        std::fs::write(&path, histogram(&title, "log10 MSE", &series))?;
        written.push(path);
    }
    Ok(written)
}

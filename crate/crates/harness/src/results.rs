//! `rows.csv` (one row per image and grid point) and the long-format
//! `summary.csv` derived from it.
//!
//! Every statistic in the summary is a function of the rows alone, so
//! `report` can regenerate it from an existing output directory.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use scaleadv::defenses::smooth_median::quantile_sorted;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Mode name of held-out benign images scored for threshold calibration.
pub const CALIBRATION_MODE: &str = "benign-calibration";
pub const DETECTION_PERCENTILE: f64 = 95.0;
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub defense: String,
    pub scaler: String,
    pub beta: usize,
    pub mode: String,
    /// Grid parameter name (`epsilon`, `kappa`, `budget`, or `-`).
    pub param: String,
    pub value: f64,
    pub image: usize,
    pub label: usize,
    pub scaled_l2: Option<f64>,
    pub success: Option<bool>,
    /// Success re-checked after rounding the image to 8 bits.
    pub quantized_success: Option<bool>,
    /// Whether the (attacked) input is still classified correctly.
    pub correct: Option<bool>,
    pub queries: Option<usize>,
    pub unscaling: Option<f64>,
    pub minfilter: Option<f64>,
    pub spectrum: Option<f64>,
}

impl ResultRow {
    pub fn new(experiment: &str, defense: &str, scaler: &str, beta: usize, mode: &str, param: &str, value: f64, image: usize, label: usize) -> Self {
        Self {
            experiment: experiment.into(),
            defense: defense.into(),
            scaler: scaler.into(),
            beta,
            mode: mode.into(),
            param: param.into(),
            value,
            image,
            label,
            scaled_l2: None,
            success: None,
            quantized_success: None,
            correct: None,
            queries: None,
            unscaling: None,
            minfilter: None,
            spectrum: None,
        }
    }

    fn group(&self) -> GroupKey {
        GroupKey {
            experiment: self.experiment.clone(),
            defense: self.defense.clone(),
            scaler: self.scaler.clone(),
            beta: self.beta,
            mode: self.mode.clone(),
            param: self.param.clone(),
            value: OrdF64(self.value),
        }
    }

    fn detector_scores(&self) -> [(&'static str, Option<f64>); 3] {
        [("unscaling", self.unscaling), ("minfilter", self.minfilter), ("spectrum", self.spectrum)]
    }
}

/// Grid-point order, then image id.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| a.group().cmp(&b.group()).then(a.image.cmp(&b.image)));
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let mut w = csv::Writer::from_path(path)?;
    for r in &sorted {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct GroupKey {
    experiment: String,
    defense: String,
    scaler: String,
    beta: usize,
    mode: String,
    param: String,
    value: OrdF64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub defense: String,
    pub scaler: String,
    pub beta: usize,
    pub mode: String,
    pub param: String,
    pub value: f64,
    pub statistic: String,
    pub stat: f64,
}

impl SummaryRow {
    fn from_key(key: &GroupKey, statistic: impl Into<String>, stat: f64) -> Self {
        Self {
            experiment: key.experiment.clone(),
            defense: key.defense.clone(),
            scaler: key.scaler.clone(),
            beta: key.beta,
            mode: key.mode.clone(),
            param: key.param.clone(),
            value: key.value.0,
            statistic: statistic.into(),
            stat,
        }
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    // midpoint average, written so infinite entries stay infinite
    let (lo, hi) = (values[(n - 1) / 2], values[n / 2]);
    Some(if lo == hi { lo } else { lo + (hi - lo) / 2.0 })
}

fn rate(flags: impl Iterator<Item = Option<bool>>) -> Option<f64> {
    let (mut n, mut yes) = (0usize, 0usize);
    for f in flags.flatten() {
        n += 1;
        yes += usize::from(f);
    }
    (n > 0).then(|| yes as f64 / n as f64)
}

/// Benign-percentile thresholds per detector, calibrated on the
/// [`CALIBRATION_MODE`] rows of one `(experiment, defense, scaler, beta)`.
pub fn thresholds(rows: &[&ResultRow]) -> BTreeMap<&'static str, f64> {
    let mut out = BTreeMap::new();
    let calib: Vec<_> = rows.iter().filter(|r| r.mode == CALIBRATION_MODE).collect();
    for (i, name) in ["unscaling", "minfilter", "spectrum"].into_iter().enumerate() {
        let mut scores: Vec<f64> = calib.iter().filter_map(|r| r.detector_scores()[i].1).collect();
        if scores.is_empty() {
            continue;
        }
        scores.sort_by(f64::total_cmp);
        out.insert(name, quantile_sorted(&scores, DETECTION_PERCENTILE / 100.0).max(scaleadv::defenses::detection::THRESHOLD_FLOOR));
    }
    out
}

/// Median with failed attacks counted as infinitely large perturbations.
fn median_perturbation(rows: &[&ResultRow]) -> Option<f64> {
    let mut v: Vec<f64> = rows
        .iter()
        .filter_map(|r| match (r.scaled_l2, r.success) {
            (_, Some(false)) => Some(f64::INFINITY),
            (Some(d), _) => Some(d),
            _ => None,
        })
        .collect();
    median(&mut v)
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.group()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (key, members) in &groups {
        out.push(SummaryRow::from_key(key, "count", members.len() as f64));
        if let Some(m) = median_perturbation(members) {
            out.push(SummaryRow::from_key(key, "median_scaled_l2", m));
        }
        let stats = [
            ("success_rate", rate(members.iter().map(|r| r.success))),
            ("quantized_success_rate", rate(members.iter().map(|r| r.quantized_success))),
            ("accuracy", rate(members.iter().map(|r| r.correct))),
            ("median_queries", median(&mut members.iter().filter_map(|r| r.queries.map(|q| q as f64)).collect::<Vec<_>>())),
        ];
        for (name, v) in stats {
            if let Some(v) = v {
                out.push(SummaryRow::from_key(key, name, v));
            }
        }
    }
    out.extend(detection_summary(rows));
    out
}

/// Flag rates at the calibrated thresholds and shared-bin histograms of the
/// log10 unscaling score, for every setting that has calibration rows.
fn detection_summary(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut settings: BTreeMap<(String, String, String, usize), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        settings.entry((r.experiment.clone(), r.defense.clone(), r.scaler.clone(), r.beta)).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((experiment, defense, scaler, beta), members) in settings {
        if !members.iter().any(|r| r.mode == CALIBRATION_MODE) {
            continue;
        }
        let th = thresholds(&members);
        let key = |mode: &str, param: &str, value: f64| GroupKey {
            experiment: experiment.clone(),
            defense: defense.clone(),
            scaler: scaler.clone(),
            beta,
            mode: mode.into(),
            param: param.into(),
            value: OrdF64(value),
        };
        for (name, t) in &th {
            out.push(SummaryRow::from_key(&key(CALIBRATION_MODE, "-", 0.0), format!("threshold_{name}"), *t));
        }
        let mut by_mode: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
        for r in &members {
            by_mode.entry(r.group()).or_default().push(r);
        }
        let logs: Vec<f64> = members.iter().filter_map(|r| r.unscaling).map(|s| s.max(1e-12).log10()).collect();
        let (lo, hi) = logs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        for (k, rs) in &by_mode {
            for (i, name) in ["unscaling", "minfilter", "spectrum"].into_iter().enumerate() {
                let Some(t) = th.get(name) else { continue };
                let flagged = rate(rs.iter().map(|r| r.detector_scores()[i].1.map(|s| s > *t)));
                if let Some(f) = flagged {
                    out.push(SummaryRow::from_key(k, format!("flagged_{name}"), f));
                }
            }
            if lo.is_finite() && hi > lo {
                let width = (hi - lo) / HISTOGRAM_BINS as f64;
                let mut counts = [0usize; HISTOGRAM_BINS];
                for s in rs.iter().filter_map(|r| r.unscaling) {
                    let b = ((s.max(1e-12).log10() - lo) / width).floor() as isize;
                    counts[b.clamp(0, HISTOGRAM_BINS as isize - 1) as usize] += 1;
                }
                if rs.iter().any(|r| r.unscaling.is_some()) {
                    for (b, c) in counts.iter().enumerate() {
                        let edge = lo + width * b as f64;
                        out.push(SummaryRow::from_key(k, format!("hist_log10_unscaling:{edge}:{}", edge + width), *c as f64));
                    }
                }
            }
        }
    }
    out
}

pub fn write_summary(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in summary {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<SummaryRow>, _>>()?)
}

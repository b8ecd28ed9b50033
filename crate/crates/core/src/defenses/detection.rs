//! Threshold detectors for scaling-attack images.
//!
//! * unscaling: distortion between `x` and `upscale(downscale(x))`;
//! * min-filter: distortion between `x` and its 3×3 minimum filter;
//! * spectrum: number of strong peaks in the centered log-magnitude spectrum.
//!
//! Spatial detectors measure distortion as MSE or as `1 − SSIM`, so every
//! score is nonnegative and larger means more suspicious. An image is flagged
//! when its score exceeds the calibrated threshold.

use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::{DiffImage, Grid, Image, Shape};
use crate::scaling::{Resampler, ScalerKind, ScalerSpec};

use super::prevention::reflect;
use super::smooth_median::quantile_sorted;

/// Lower bound on calibrated thresholds so an all-zero benign corpus still
/// yields a positive threshold.
pub const THRESHOLD_FLOOR: f64 = 1e-12;
pub const DEFAULT_PERCENTILE: f64 = 95.0;
pub const MINFILTER_WINDOW: usize = 3;
pub const SSIM_WINDOW: usize = 8;
/// Spectrum peaks closer than this to the DC term are ignored.
pub const SPECTRUM_DC_RADIUS: f64 = 5.0;
/// A spectrum peak must exceed mean + this many standard deviations.
pub const SPECTRUM_SIGMA: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DetectionKind {
    Unscaling,
    MinFilter,
    Spectrum,
}

impl fmt::Display for DetectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectionKind::Unscaling => "unscaling",
            DetectionKind::MinFilter => "minfilter",
            DetectionKind::Spectrum => "spectrum",
        })
    }
}

impl FromStr for DetectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unscaling" => Ok(DetectionKind::Unscaling),
            "minfilter" | "min-filter" => Ok(DetectionKind::MinFilter),
            "spectrum" => Ok(DetectionKind::Spectrum),
            other => Err(Error::InvalidArgument(format!("unknown detector {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistortionMetric {
    Mse,
    Ssim,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSpec {
    kind: DetectionKind,
    metric: DistortionMetric,
    threshold: f64,
    scaler: ScalerSpec,
    upscaler: Resampler,
}

impl DetectionSpec {
    /// Uncalibrated detector. The spectrum detector starts at its fixed rule
    /// (more than one peak); spatial detectors start at the threshold floor.
    pub fn new(kind: DetectionKind, metric: DistortionMetric, scaler: ScalerSpec) -> Result<Self> {
        let upscaler = Resampler::new(ScalerKind::Bilinear, scaler.out_hw(), scaler.in_hw())?;
        let threshold = if kind == DetectionKind::Spectrum { 1.0 } else { THRESHOLD_FLOOR };
        Ok(Self { kind, metric, threshold, scaler, upscaler })
    }

    pub fn kind(&self) -> DetectionKind {
        self.kind
    }

    pub fn metric(&self) -> DistortionMetric {
        self.metric
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn scaler(&self) -> &ScalerSpec {
        &self.scaler
    }

    pub fn with_threshold(&self, threshold: f64) -> Result<Self> {
        if !(threshold.is_finite() && threshold > 0.0) {
            return Err(Error::InvalidArgument(format!("threshold {threshold} must be finite and positive")));
        }
        Ok(Self { threshold, ..self.clone() })
    }

    pub fn flags(&self, img: &Image) -> Result<bool> {
        Ok(detect_score(self, img)? > self.threshold)
    }

    /// Unscaling round trip `upscale(downscale(x))`.
    pub fn round_trip(&self, img: &Image) -> Result<Image> {
        let low = self.scaler.resampler().forward(img)?;
        self.upscaler.forward(&low).map(Image::from)
    }

    fn round_trip_adjoint(&self, g: &DiffImage) -> Result<DiffImage> {
        let low = self.upscaler.adjoint(g)?;
        self.scaler.resampler().adjoint(&low).map(DiffImage::from)
    }

    /// Whether [`detect_score_grad`] is defined for this detector.
    pub fn is_differentiable(&self) -> bool {
        self.metric == DistortionMetric::Mse && self.kind != DetectionKind::Spectrum
    }
}

fn check_shape(spec: &DetectionSpec, img: &Image) -> Result<()> {
    let (h, w) = spec.scaler.in_hw();
    Shape::new(h, w, img.channels()).ensure_eq(img.shape())
}

/// 3×3 minimum filter with reflect padding; also returns the flat source
/// index chosen for every entry (ties to the first position in scan order).
pub fn min_filter(img: &Grid, window: usize) -> (Grid, Vec<usize>) {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let half = (window / 2) as isize;
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    let mut arg = vec![0; src.len()];
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut best = f64::INFINITY;
                let mut best_i = 0;
                for dr in -half..=half {
                    let rr = reflect(r as isize + dr, h);
                    for dc in -half..=half {
                        let cc = reflect(c as isize + dc, w);
                        let i = (rr * w + cc) * ch + k;
                        if src[i] < best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                let o = (r * w + c) * ch + k;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (Grid::new(img.shape(), out).expect("same shape"), arg)
}

fn distortion(metric: DistortionMetric, a: &Image, b: &Image) -> Result<f64> {
    match metric {
        DistortionMetric::Mse => a.mse(b),
        DistortionMetric::Ssim => Ok((1.0 - ssim(a, b)?).max(0.0)),
    }
}

pub fn detect_score(spec: &DetectionSpec, img: &Image) -> Result<f64> {
    check_shape(spec, img)?;
    match spec.kind {
        DetectionKind::Unscaling => distortion(spec.metric, img, &spec.round_trip(img)?),
        DetectionKind::MinFilter => {
            let (filtered, _) = min_filter(img, MINFILTER_WINDOW);
            distortion(spec.metric, img, &Image::from(filtered))
        }
        DetectionKind::Spectrum => Ok(spectrum_peaks(img) as f64),
    }
}

/// Gradient of an MSE-based unscaling or min-filter score.
pub fn detect_score_grad(spec: &DetectionSpec, img: &Image) -> Result<DiffImage> {
    check_shape(spec, img)?;
    if !spec.is_differentiable() {
        return Err(Error::InvalidArgument(format!("{} detector with {:?} metric has no gradient", spec.kind, spec.metric)));
    }
    let n = img.shape().len() as f64;
    match spec.kind {
        DetectionKind::Unscaling => {
            // score = |x − Hx|² / n  →  ∇ = 2/n · (I − Hᵀ)(x − Hx)
            let resid = img.diff(&spec.round_trip(img)?)?;
            let back = spec.round_trip_adjoint(&resid)?;
            let mut g = resid;
            g.add_assign_scaled(&back, -1.0);
            Ok(g.scale(2.0 / n))
        }
        DetectionKind::MinFilter => {
            let (filtered, arg) = min_filter(img, MINFILTER_WINDOW);
            let resid = img.diff(&Image::from(filtered))?;
            let mut g = resid.clone();
            for (o, &src) in arg.iter().enumerate() {
                g.data_mut()[src] -= resid.data()[o];
            }
            Ok(g.scale(2.0 / n))
        }
        DetectionKind::Spectrum => unreachable!("checked by is_differentiable"),
    }
}

/// Threshold at the given percentile (linear interpolation) of benign scores.
pub fn calibrate_threshold(spec: &DetectionSpec, benign: &[Image], percentile: f64) -> Result<DetectionSpec> {
    if benign.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::InvalidArgument(format!("percentile {percentile} outside [0, 100]")));
    }
    let mut scores = benign.iter().map(|img| detect_score(spec, img)).collect::<Result<Vec<_>>>()?;
    scores.sort_by(f64::total_cmp);
    let t = quantile_sorted(&scores, percentile / 100.0).max(THRESHOLD_FLOOR);
    spec.with_threshold(t)
}

/// Mean SSIM over all 8×8 windows (stride 1) and channels; images smaller
/// than a window are compared as a single window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.shape().ensure_eq(b.shape())?;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    let wh = SSIM_WINDOW.min(h);
    let ww = SSIM_WINDOW.min(w);
    let count = (wh * ww) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for k in 0..ch {
        for r0 in 0..=h - wh {
            for c0 in 0..=w - ww {
                let (mut sa, mut sb) = (0.0, 0.0);
                for r in r0..r0 + wh {
                    for c in c0..c0 + ww {
                        sa += a.get(r, c, k);
                        sb += b.get(r, c, k);
                    }
                }
                let (ma, mb) = (sa / count, sb / count);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for r in r0..r0 + wh {
                    for c in c0..c0 + ww {
                        let (x, y) = (a.get(r, c, k) - ma, b.get(r, c, k) - mb);
                        va += x * x;
                        vb += y * y;
                        cov += x * y;
                    }
                }
                let (va, vb, cov) = (va / count, vb / count, cov / count);
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                windows += 1;
            }
        }
    }
    Ok(total / windows.max(1) as f64)
}

/// Rec. 601 luma (identity for single-channel images).
pub fn luma(img: &Image) -> Grid {
    if img.channels() == 1 {
        return img.grid().clone();
    }
    let data = img.data().chunks(img.channels()).map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]).collect();
    Grid::new(img.shape().with_channels(1), data).expect("luma shape")
}

/// Centered (`fftshift`-ed) log-magnitude spectrum `ln(1 + |F|)` of the luma.
pub fn centered_log_spectrum(img: &Image) -> Grid {
    let y = luma(img);
    let (h, w) = (y.height(), y.width());
    let mut buf: Vec<Complex<f64>> = y.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = ((r + h / 2) % h, (c + w / 2) % w);
            out[sr * w + sc] = buf[r * w + c].norm().ln_1p();
        }
    }
    Grid::new(Shape::new(h, w, 1), out).expect("spectrum shape")
}

/// Counts local maxima (8-neighbourhood) of the centered log spectrum lying
/// outside the DC radius and above mean + 4σ of that region.
pub fn spectrum_peaks(img: &Image) -> usize {
    let s = centered_log_spectrum(img);
    let (h, w) = (s.height(), s.width());
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    let outside = |r: usize, c: usize| ((r as f64 - ch).powi(2) + (c as f64 - cw).powi(2)).sqrt() > SPECTRUM_DC_RADIUS;
    let vals: Vec<f64> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).filter(|&(r, c)| outside(r, c)).map(|(r, c)| s.get(r, c, 0)).collect();
    if vals.is_empty() {
        return 0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    let threshold = mean + SPECTRUM_SIGMA * sd;
    let mut peaks = 0;
    for r in 0..h {
        for c in 0..w {
            let v = s.get(r, c, 0);
            if !outside(r, c) || v <= threshold {
                continue;
            }
            let is_max = (-1..=1isize).all(|dr| {
                (-1..=1isize).all(|dc| {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    (dr == 0 && dc == 0)
                        || rr < 0
                        || cc < 0
                        || rr >= h as isize
                        || cc >= w as isize
                        || s.get(rr as usize, cc as usize, 0) <= v
                })
            });
            if is_max {
                peaks += 1;
            }
        }
    }
    peaks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn smooth_image(rng: &mut RngState, shape: Shape) -> Image {
        let (fx, fy, phase) = (rng.uniform_range(0.5, 2.0), rng.uniform_range(0.5, 2.0), rng.uniform_range(0.0, 6.0));
        Image::from_fn(shape, |r, c, k| {
            let u = r as f64 / shape.height as f64;
            let v = c as f64 / shape.width as f64;
            (0.5 + 0.3 * (fx * 3.0 * u + phase + k as f64).sin() * (fy * 3.0 * v).cos() + 0.02 * rng.normal()).clamp(0.0, 1.0)
        })
    }

    fn unscaling(in_hw: (usize, usize), out_hw: (usize, usize)) -> DetectionSpec {
        let scaler = ScalerSpec::new(ScalerKind::Bilinear, in_hw, out_hw).unwrap();
        DetectionSpec::new(DetectionKind::Unscaling, DistortionMetric::Mse, scaler).unwrap()
    }

    #[test]
    fn identity_unscaling_scores_zero() {
        let spec = unscaling((12, 12), (12, 12));
        let mut rng = RngState::new(1);
        let img = Image::from_fn(Shape::new(12, 12, 3), |_, _, _| rng.uniform());
        assert_eq!(detect_score(&spec, &img).unwrap(), 0.0);
    }

    #[test]
    fn min_filter_fixes_constants() {
        let scaler = ScalerSpec::with_ratio(ScalerKind::Bilinear, (4, 4), 3).unwrap();
        for metric in [DistortionMetric::Mse, DistortionMetric::Ssim] {
            let spec = DetectionSpec::new(DetectionKind::MinFilter, metric, scaler.clone()).unwrap();
            assert_eq!(detect_score(&spec, &Image::filled(Shape::new(12, 12, 1), 0.3)).unwrap(), 0.0);
        }
    }

    #[test]
    fn scores_are_nonnegative_and_channel_symmetric() {
        let mut rng = RngState::new(2);
        let scaler = ScalerSpec::with_ratio(ScalerKind::Bilinear, (6, 6), 3).unwrap();
        let img = Image::from_fn(Shape::new(18, 18, 3), |_, _, _| rng.uniform());
        let permuted = Image::from_fn(img.shape(), |r, c, k| img.get(r, c, (k + 1) % 3));
        for kind in [DetectionKind::Unscaling, DetectionKind::MinFilter, DetectionKind::Spectrum] {
            for metric in [DistortionMetric::Mse, DistortionMetric::Ssim] {
                let spec = DetectionSpec::new(kind, metric, scaler.clone()).unwrap();
                assert!(detect_score(&spec, &img).unwrap() >= 0.0);
            }
        }
        let spec = unscaling((18, 18), (6, 6));
        let (a, b) = (detect_score(&spec, &img).unwrap(), detect_score(&spec, &permuted).unwrap());
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let spec = unscaling((12, 12), (4, 4));
        assert!(matches!(detect_score(&spec, &Image::zeros(Shape::new(8, 12, 1))), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        let mut rng = RngState::new(3);
        let scaler = ScalerSpec::with_ratio(ScalerKind::Bilinear, (4, 4), 3).unwrap();
        for kind in [DetectionKind::Unscaling, DetectionKind::MinFilter] {
            let spec = DetectionSpec::new(kind, DistortionMetric::Mse, scaler.clone()).unwrap();
            let img = Image::from_fn(Shape::new(12, 12, 2), |_, _, _| rng.uniform());
            let g = detect_score_grad(&spec, &img).unwrap();
            let h = 1e-6;
            for i in 0..img.data().len() {
                let mut p = img.clone();
                let mut m = img.clone();
                p.data_mut()[i] += h;
                m.data_mut()[i] -= h;
                let fd = (detect_score(&spec, &p).unwrap() - detect_score(&spec, &m).unwrap()) / (2.0 * h);
                assert!((fd - g.data()[i]).abs() <= 1e-6 * fd.abs().max(1e-3), "{kind} {i}: {fd} vs {}", g.data()[i]);
            }
        }
        let spectrum = DetectionSpec::new(DetectionKind::Spectrum, DistortionMetric::Mse, scaler).unwrap();
        assert!(detect_score_grad(&spectrum, &Image::zeros(Shape::new(12, 12, 1))).is_err());
    }

    #[test]
    fn calibration_examples() {
        let spec = unscaling((12, 12), (12, 12));
        let same = vec![Image::filled(Shape::new(12, 12, 1), 0.5); 5];
        let t = calibrate_threshold(&spec, &same, 95.0).unwrap();
        assert_eq!(t.threshold(), THRESHOLD_FLOOR);
        assert!(matches!(calibrate_threshold(&spec, &[], 95.0), Err(Error::EmptyCorpus)));

        let spec = unscaling((12, 12), (4, 4));
        let mut rng = RngState::new(4);
        let corpus: Vec<Image> = (0..10).map(|_| Image::from_fn(Shape::new(12, 12, 1), |_, _, _| rng.uniform())).collect();
        let max = corpus.iter().map(|i| detect_score(&spec, i).unwrap()).fold(0.0, f64::max);
        assert_eq!(calibrate_threshold(&spec, &corpus, 100.0).unwrap().threshold(), max);
    }

    #[test]
    fn ssim_properties() {
        let mut rng = RngState::new(5);
        let shape = Shape::new(24, 24, 1);
        let a = smooth_image(&mut rng, shape);
        let b = smooth_image(&mut rng, shape);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let inv = Image::from_fn(shape, |r, c, k| 1.0 - a.get(r, c, k));
        assert!(ssim(&a, &inv).unwrap() < 0.2);
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn periodic_pattern_produces_spectrum_peaks() {
        let mut rng = RngState::new(6);
        let shape = Shape::new(64, 64, 1);
        let benign = smooth_image(&mut rng, shape);
        let mut attacked = benign.clone();
        // bright vulnerable pixels on a period-4 lattice
        for r in (1..64).step_by(4) {
            for c in (1..64).step_by(4) {
                attacked.set(r, c, 0, 1.0);
            }
        }
        assert!(spectrum_peaks(&attacked) > 1);
        assert!(spectrum_peaks(&benign) <= spectrum_peaks(&attacked));
    }
}

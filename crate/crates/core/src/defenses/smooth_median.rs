//! Trimmed, deviation-weighted average used as a differentiable stand-in for
//! the median in black-box gradient estimation.
//!
//! `smooth_median(x) = Σ xᵢωᵢ / Σ ωᵢ` with
//! `ωᵢ = (1 − |xᵢ − median(x)|) · 𝟙{x₍ₐ₎ ≤ xᵢ ≤ x₍ᵦ₎}`, where `x₍ₐ₎` and `x₍ᵦ₎`
//! are the `a`- and `b`-quantiles of `x`.

use crate::error::{Error, Result};
use crate::image::{DiffImage, Image, Shape};

use super::prevention::{median_position, PreventionSpec};

pub const DEFAULT_QUANTILES: (f64, f64) = (0.2, 0.8);

/// Quantile of already-sorted values by linear interpolation at `q · (n − 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

fn check_bounds(values: &[f64], a: f64, b: f64) -> Result<()> {
    if values.is_empty() {
        return Err(Error::EmptyWindow);
    }
    if !(0.0 <= a && a < b && b <= 1.0) {
        return Err(Error::InvalidArgument(format!("quantile bounds ({a}, {b}) must satisfy 0 <= a < b <= 1")));
    }
    Ok(())
}

struct Weights {
    median_pos: usize,
    median: f64,
    inside: Vec<bool>,
    omega: Vec<f64>,
    total: f64,
}

fn weights(values: &[f64], a: f64, b: f64) -> Result<Weights> {
    check_bounds(values, a, b)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (quantile_sorted(&sorted, a), quantile_sorted(&sorted, b));
    let median_pos = median_position(values)?;
    let median = values[median_pos];
    let inside: Vec<bool> = values.iter().map(|&x| lo <= x && x <= hi).collect();
    let omega: Vec<f64> = values.iter().zip(&inside).map(|(&x, &i)| if i { 1.0 - (x - median).abs() } else { 0.0 }).collect();
    let total = omega.iter().sum();
    Ok(Weights { median_pos, median, inside, omega, total })
}

pub fn smooth_median(values: &[f64], a: f64, b: f64) -> Result<f64> {
    let w = weights(values, a, b)?;
    if w.total <= 0.0 {
        return Ok(w.median);
    }
    Ok(values.iter().zip(&w.omega).map(|(x, o)| x * o).sum::<f64>() / w.total)
}

/// Gradient of [`smooth_median`] with respect to every input.
///
/// The quantile indicators are piecewise constant and contribute nothing;
/// the deviation term `|xᵢ − median|` is differentiated through both `xᵢ` and
/// the median element. With all deviations zero this reduces to the
/// frozen-weight average `ωᵢ / Σω`. Entries outside the quantile band get
/// zero gradient unless they are the median element itself.
pub fn smooth_median_grad(values: &[f64], a: f64, b: f64) -> Result<Vec<f64>> {
    let w = weights(values, a, b)?;
    if w.total <= 0.0 {
        return Ok(vec![0.0; values.len()]);
    }
    let s = values.iter().zip(&w.omega).map(|(x, o)| x * o).sum::<f64>() / w.total;
    let sign = |x: f64| -> f64 {
        let d = x - w.median;
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let mut grad: Vec<f64> = values
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let deviation = if w.inside[i] { -sign(x) * (x - s) } else { 0.0 };
            (w.omega[i] + deviation) / w.total
        })
        .collect();
    let through_median: f64 =
        values.iter().zip(&w.inside).filter(|(_, &i)| i).map(|(&x, _)| sign(x) * (x - s)).sum();
    grad[w.median_pos] += through_median / w.total;
    Ok(grad)
}

/// Median-defended image with every masked window reduced by
/// [`smooth_median`] instead of the exact median.
pub fn smooth_defense(spec: &PreventionSpec, img: &Image, a: f64, b: f64) -> Result<Image> {
    spec.mask().check_hw(img.shape())?;
    let ch = img.channels();
    let width = img.width();
    let src = img.data();
    let mut out = img.clone();
    let mut window = Vec::new();
    let mut values = Vec::new();
    for (r, c) in spec.masked_pixels() {
        spec.window_pixels(r, c, &mut window);
        for k in 0..ch {
            values.clear();
            values.extend(window.iter().map(|&p| src[p * ch + k]));
            out.data_mut()[(r * width + c) * ch + k] = smooth_median(&values, a, b)?;
        }
    }
    Ok(out)
}

/// Jacobian of [`smooth_defense`] at a fixed image, stored sparsely so that
/// many vector-Jacobian products at the same point stay cheap.
#[derive(Debug, Clone)]
pub struct SmoothDefenseJacobian {
    shape: Shape,
    /// Masked output entries, with `offsets[i]..offsets[i + 1]` into `taps`.
    outputs: Vec<usize>,
    offsets: Vec<usize>,
    taps: Vec<(usize, f64)>,
}

impl SmoothDefenseJacobian {
    pub fn new(spec: &PreventionSpec, img: &Image, a: f64, b: f64) -> Result<Self> {
        spec.mask().check_hw(img.shape())?;
        let ch = img.channels();
        let width = img.width();
        let src = img.data();
        let mut outputs = Vec::new();
        let mut offsets = vec![0];
        let mut taps = Vec::new();
        let mut window = Vec::new();
        let mut values = Vec::new();
        for (r, c) in spec.masked_pixels() {
            spec.window_pixels(r, c, &mut window);
            for k in 0..ch {
                values.clear();
                values.extend(window.iter().map(|&p| src[p * ch + k]));
                let local = smooth_median_grad(&values, a, b)?;
                taps.extend(window.iter().zip(local).filter(|(_, d)| *d != 0.0).map(|(&p, d)| (p * ch + k, d)));
                outputs.push((r * width + c) * ch + k);
                offsets.push(taps.len());
            }
        }
        Ok(Self { shape: img.shape(), outputs, offsets, taps })
    }

    pub fn vjp(&self, grad_out: &DiffImage) -> Result<DiffImage> {
        self.shape.ensure_eq(grad_out.shape())?;
        let g = grad_out.data();
        let mut grad_in = grad_out.clone();
        let out = grad_in.data_mut();
        for &o in &self.outputs {
            out[o] = 0.0;
        }
        for (i, &o) in self.outputs.iter().enumerate() {
            let upstream = g[o];
            if upstream == 0.0 {
                continue;
            }
            for &(p, d) in &self.taps[self.offsets[i]..self.offsets[i + 1]] {
                out[p] += upstream * d;
            }
        }
        Ok(grad_in)
    }
}

/// Vector-Jacobian product of [`smooth_defense`] at `img`.
pub fn smooth_defense_backprop(spec: &PreventionSpec, img: &Image, grad_out: &DiffImage, a: f64, b: f64) -> Result<DiffImage> {
    img.shape().ensure_eq(grad_out.shape())?;
    SmoothDefenseJacobian::new(spec, img, a, b)?.vjp(grad_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn examples() {
        assert_eq!(DEFAULT_QUANTILES, (0.2, 0.8));
        assert_eq!(smooth_median(&[0.3; 7], 0.2, 0.8).unwrap(), 0.3);
        assert_eq!(smooth_median(&[0.0, 0.5, 1.0], 0.2, 0.8).unwrap(), 0.5);
        assert!(smooth_median(&[], 0.2, 0.8).is_err());
        assert!(smooth_median(&[0.1], 0.8, 0.2).is_err());
    }

    #[test]
    fn constant_list_has_uniform_gradient() {
        let g = smooth_median_grad(&[0.4; 5], 0.2, 0.8).unwrap();
        for v in &g {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn trimmed_entries_get_zero_gradient() {
        let x = [0.05, 0.9, 0.5, 0.45, 0.55, 0.52, 0.48];
        let g = smooth_median_grad(&x, 0.2, 0.8).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unbounded_quantiles_keep_every_entry() {
        let x = [0.0, 0.2, 0.9];
        let s = smooth_median(&x, 0.0, 1.0).unwrap();
        // weights 0.8, 1.0, 0.3
        assert!((s - (0.2 + 0.27) / 2.1).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = RngState::new(10);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 200 {
            let x: Vec<f64> = (0..25).map(|_| rng.uniform()).collect();
            let mut sorted = x.clone();
            sorted.sort_by(f64::total_cmp);
            let (lo, hi) = (quantile_sorted(&sorted, 0.2), quantile_sorted(&sorted, 0.8));
            let min_gap = sorted.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
            let near_bound = x.iter().any(|v| (v - lo).abs() < 1e-4 || (v - hi).abs() < 1e-4);
            if near_bound || min_gap < 1e-4 {
                continue;
            }
            let g = smooth_median_grad(&x, 0.2, 0.8).unwrap();
            for i in 0..x.len() {
                let mut p = x.clone();
                let mut m = x.clone();
                p[i] += h;
                m[i] -= h;
                let fd = (smooth_median(&p, 0.2, 0.8).unwrap() - smooth_median(&m, 0.2, 0.8).unwrap()) / (2.0 * h);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
                assert!(err <= 1e-6, "coord {i}: fd {fd} vs {}", g[i]);
            }
            checked += 1;
        }
    }

    #[test]
    fn defense_backprop_matches_finite_differences() {
        use crate::scaling::VulnerabilityMask;
        use crate::defenses::PreventionKind;
        let mut rng = RngState::new(21);
        let img = Image::from_fn(crate::image::Shape::new(6, 6, 1), |_, _, _| rng.uniform());
        let mut bits = vec![false; 36];
        for i in [7, 14, 21, 28] {
            bits[i] = true;
        }
        let spec = PreventionSpec::new(PreventionKind::Median, (3, 3), VulnerabilityMask::new(6, 6, bits).unwrap()).unwrap();
        let w = DiffImage::from_fn(img.shape(), |_, _, _| rng.normal());
        let grad = smooth_defense_backprop(&spec, &img, &w, 0.0, 1.0).unwrap();
        let f = |x: &Image| smooth_defense(&spec, x, 0.0, 1.0).unwrap().grid().dot(w.grid());
        let h = 1e-6;
        for i in 0..36 {
            let mut p = img.clone();
            let mut m = img.clone();
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() <= 1e-6 * fd.abs().max(1.0), "{i}: {fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn stays_within_range() {
        let mut rng = RngState::new(3);
        for _ in 0..500 {
            let n = 1 + rng.below(30);
            let x: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let s = smooth_median(&x, 0.2, 0.8).unwrap();
            let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo <= s && s <= hi);
        }
    }
}

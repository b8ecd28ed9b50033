//! Sampling distribution of the randomized-filter distortion `defense(x) − x`
//! over vulnerable pixels, with a maximum-likelihood Laplace fit.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RngState;

use super::prevention::{apply_prevention, PreventionKind, PreventionSpec};

pub const DEFAULT_DRAWS: usize = 200;
pub const HISTOGRAM_BINS: usize = 81;

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionHistogram {
    /// `HISTOGRAM_BINS + 1` edges spanning `[-1, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Laplace location (sample median).
    pub location: f64,
    /// Laplace scale `b = mean |d − location|`.
    pub scale: f64,
    samples: Vec<f64>,
}

impl DistortionHistogram {
    /// Sorted distortion samples.
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn laplace_cdf(&self, x: f64) -> f64 {
        if self.scale <= 0.0 {
            return if x >= self.location { 1.0 } else { 0.0 };
        }
        let z = (x - self.location) / self.scale;
        if z < 0.0 {
            0.5 * z.exp()
        } else {
            1.0 - 0.5 * (-z).exp()
        }
    }

    /// Kolmogorov distance between the empirical CDF and the fitted Laplace CDF.
    pub fn kolmogorov_distance(&self) -> f64 {
        let n = self.samples.len() as f64;
        let mut worst = 0.0f64;
        let mut i = 0;
        while i < self.samples.len() {
            let x = self.samples[i];
            let mut j = i;
            while j < self.samples.len() && self.samples[j] == x {
                j += 1;
            }
            // left limit differs from the CDF only for the degenerate fit
            let left = if self.scale <= 0.0 { f64::from(u8::from(x > self.location)) } else { self.laplace_cdf(x) };
            worst = worst.max((left - i as f64 / n).abs()).max((self.laplace_cdf(x) - j as f64 / n).abs());
            i = j;
        }
        worst
    }
}

pub fn distortion_histogram(spec: &PreventionSpec, img: &Image, rng: &mut RngState, draws: usize) -> Result<DistortionHistogram> {
    if spec.kind() != PreventionKind::Randomized {
        return Err(Error::InvalidArgument("distortion histogram needs a randomized defense".into()));
    }
    if draws < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 draws, got {draws}")));
    }
    spec.mask().check_hw(img.shape())?;
    let ch = img.channels();
    let masked: Vec<usize> = spec
        .masked_pixels()
        .flat_map(|(r, c)| (0..ch).map(move |k| (r * img.width() + c) * ch + k))
        .collect();
    let mut samples = Vec::with_capacity(masked.len() * draws);
    for _ in 0..draws {
        let out = apply_prevention(spec, img, rng)?;
        samples.extend(masked.iter().map(|&i| out.data()[i] - img.data()[i]));
    }
    samples.sort_by(f64::total_cmp);
    let location = if samples.is_empty() { 0.0 } else { samples[(samples.len() - 1) / 2] };
    let scale = if samples.is_empty() { 0.0 } else { samples.iter().map(|d| (d - location).abs()).sum::<f64>() / samples.len() as f64 };

    let edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|i| -1.0 + 2.0 * i as f64 / HISTOGRAM_BINS as f64).collect();
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &d in &samples {
        let bin = (((d + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor() as isize).clamp(0, HISTOGRAM_BINS as isize - 1);
        counts[bin as usize] += 1;
    }
    Ok(DistortionHistogram { edges, counts, location, scale, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;
    use crate::scaling::VulnerabilityMask;

    fn spec(hw: (usize, usize)) -> PreventionSpec {
        PreventionSpec::new(PreventionKind::Randomized, (5, 5), VulnerabilityMask::full(hw.0, hw.1, true)).unwrap()
    }

    #[test]
    fn constant_image_has_all_mass_at_zero() {
        let img = Image::filled(Shape::new(10, 10, 1), 0.3);
        let h = distortion_histogram(&spec((10, 10)), &img, &mut RngState::new(0), DEFAULT_DRAWS).unwrap();
        assert_eq!(DEFAULT_DRAWS, 200);
        let zero_bin = HISTOGRAM_BINS / 2;
        assert_eq!(h.counts[zero_bin], 100 * 200);
        assert_eq!(h.counts.iter().sum::<u64>(), 100 * 200);
        assert_eq!(h.scale, 0.0);
        assert_eq!(h.kolmogorov_distance(), 0.0);
    }

    #[test]
    fn laplace_fits_a_textured_image() {
        let mut rng = RngState::new(1);
        let (fx, fy) = (0.35, 0.22);
        let img = Image::from_fn(Shape::new(32, 32, 1), |r, c, _| {
            (0.5 + 0.25 * (fx * r as f64).sin() + 0.2 * (fy * c as f64).cos() + 0.05 * rng.normal()).clamp(0.0, 1.0)
        });
        let h = distortion_histogram(&spec((32, 32)), &img, &mut rng, 200).unwrap();
        let ks = h.kolmogorov_distance();
        assert!(ks <= 0.15, "ks {ks}");
        assert!(h.scale > 0.0);
    }

    #[test]
    fn rejects_small_draw_counts_and_median_kind() {
        let img = Image::filled(Shape::new(4, 4, 1), 0.3);
        assert!(distortion_histogram(&spec((4, 4)), &img, &mut RngState::new(0), 50).is_err());
        let med = spec((4, 4)).with_kind(PreventionKind::Median);
        assert!(distortion_histogram(&med, &img, &mut RngState::new(0), 200).is_err());
    }
}

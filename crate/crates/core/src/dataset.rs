use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::rng::RngState;
use crate::scaling::{Resampler, ScalerKind};

/// Range of per-image fine-texture amplitude for high-resolution sources.
/// Real HR photos carry detail the downscaler never sees, and how much varies
/// from image to image; a single fixed level would make the unscaling round
/// trip of benign inputs unrealistically exact.
pub const HR_TEXTURE: (f64, f64) = (0.02, 0.15);

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<(Image, usize)>,
    class_count: usize,
}

impl Dataset {
    pub fn new(samples: Vec<(Image, usize)>, class_count: usize) -> Result<Self> {
        if let Some((first, _)) = samples.first() {
            let shape = first.shape();
            for (img, label) in &samples {
                shape.ensure_eq(img.shape())?;
                if *label >= class_count {
                    return Err(Error::InvalidLabel { label: *label, class_count });
                }
            }
        }
        Ok(Self { samples, class_count })
    }

    pub fn samples(&self) -> &[(Image, usize)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Shape shared by all samples; `None` when empty.
    pub fn shape(&self) -> Option<Shape> {
        self.samples.first().map(|(img, _)| img.shape())
    }

    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let (a, b) = self.samples.split_at(n);
        (
            Dataset { samples: a.to_vec(), class_count: self.class_count },
            Dataset { samples: b.to_vec(), class_count: self.class_count },
        )
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.class_count];
        for (_, label) in &self.samples {
            hist[*label] += 1;
        }
        hist
    }
}

/// Shape families drawn by [`synth_dataset`]; class `k` always draws `SHAPES[k]`.
const SHAPES: [ShapeKind; 10] = [
    ShapeKind::Rectangle,
    ShapeKind::Disk,
    ShapeKind::Cross,
    ShapeKind::Triangle,
    ShapeKind::Ring,
    ShapeKind::HBars,
    ShapeKind::VBars,
    ShapeKind::Diagonal,
    ShapeKind::Frame,
    ShapeKind::Saltire,
];

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Rectangle,
    Disk,
    Cross,
    Triangle,
    Ring,
    HBars,
    VBars,
    Diagonal,
    Frame,
    Saltire,
}

impl ShapeKind {
    /// Membership test in shape-local coordinates `(u, v) ∈ [-1, 1]²`.
    fn contains(self, u: f64, v: f64) -> bool {
        let (au, av) = (u.abs(), v.abs());
        match self {
            ShapeKind::Rectangle => au <= 0.9 && av <= 0.6,
            ShapeKind::Disk => u * u + v * v <= 0.85,
            ShapeKind::Cross => (au <= 0.25 && av <= 0.95) || (av <= 0.25 && au <= 0.95),
            ShapeKind::Triangle => v >= -0.8 && v <= 0.9 && au <= (0.9 - v) * 0.55,
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.35..=0.9).contains(&r2)
            }
            ShapeKind::HBars => au <= 0.95 && (av <= 0.15 || (av >= 0.6 && av <= 0.9)),
            ShapeKind::VBars => av <= 0.95 && (au <= 0.15 || (au >= 0.6 && au <= 0.9)),
            ShapeKind::Diagonal => au <= 0.95 && av <= 0.95 && (u - v).abs() <= 0.35,
            ShapeKind::Frame => au <= 0.9 && av <= 0.9 && (au >= 0.55 || av >= 0.55),
            ShapeKind::Saltire => au <= 0.95 && av <= 0.95 && ((u - v).abs() <= 0.25 || (u + v).abs() <= 0.25),
        }
    }
}

/// Generates labeled single-channel geometric-shape images. Labels are
/// assigned round-robin; position, size, intensities and noise are drawn from
/// `rng`, so the output is fully determined by the seed.
pub fn synth_dataset(rng: &mut RngState, n: usize, side: usize, class_count: usize) -> Result<Dataset> {
    if !(2..=10).contains(&class_count) {
        return Err(Error::InvalidArgument(format!("class_count {class_count} outside 2..=10")));
    }
    if side < 8 {
        return Err(Error::TooSmall(side));
    }
    let shape = Shape::new(side, side, 1);
    let samples = (0..n)
        .map(|i| {
            let label = i % class_count;
            (render_shape(rng, shape, SHAPES[label]), label)
        })
        .collect();
    Dataset::new(samples, class_count)
}

/// High-resolution stand-in for `lr`: bilinear upscale by `beta` plus mild
/// Gaussian noise of standard deviation `noise`, clamped to `[0, 1]`.
pub fn hr_source(lr: &Image, beta: usize, noise: f64, rng: &mut RngState) -> Result<Image> {
    if beta < 1 {
        return Err(Error::InvalidRatio(beta as f64));
    }
    let (h, w) = (lr.height(), lr.width());
    let up = Resampler::new(ScalerKind::Bilinear, (h, w), (h * beta, w * beta))?.forward(lr)?;
    let mut out = Image::from(up);
    for v in out.data_mut() {
        *v = (*v + noise * rng.normal()).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// HR stand-ins for every sample of `ds`, each with its own texture amplitude
/// drawn uniformly from [`HR_TEXTURE`].
pub fn hr_corpus(ds: &Dataset, beta: usize, rng: &mut RngState) -> Result<Vec<(Image, usize)>> {
    ds.samples()
        .iter()
        .map(|(img, label)| {
            let amplitude = rng.uniform_range(HR_TEXTURE.0, HR_TEXTURE.1);
            Ok((hr_source(img, beta, amplitude, rng)?, *label))
        })
        .collect()
}

fn render_shape(rng: &mut RngState, shape: Shape, kind: ShapeKind) -> Image {
    let side = shape.height as f64;
    let radius = side * rng.uniform_range(0.28, 0.40);
    let margin = radius + 1.0;
    let cy = rng.uniform_range(margin, (side - margin).max(margin));
    let cx = rng.uniform_range(margin, (side - margin).max(margin));
    let background = rng.uniform_range(0.0, 0.35);
    let foreground = rng.uniform_range(0.65, 1.0);
    let noise = 0.03;
    // 2x2 supersampling for anti-aliased edges
    let offsets = [0.25, 0.75];
    Image::from_fn(shape, |r, c, _| {
        let mut hits = 0;
        for dy in offsets {
            for dx in offsets {
                let v = (r as f64 + dy - cy) / radius;
                let u = (c as f64 + dx - cx) / radius;
                if kind.contains(u, v) {
                    hits += 1;
                }
            }
        }
        let cover = f64::from(hits) / 4.0;
        let value = background + cover * (foreground - background) + noise * rng.normal();
        value.clamp(0.0, 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(&mut RngState::new(7), 10, 32, 3).unwrap();
        let b = synth_dataset(&mut RngState::new(7), 10, 32, 3).unwrap();
        assert_eq!(a, b);
        let bits = |d: &Dataset| d.samples().iter().flat_map(|(i, _)| i.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn synth_empty_and_errors() {
        let mut rng = RngState::new(1);
        assert!(synth_dataset(&mut rng, 0, 32, 3).unwrap().is_empty());
        assert!(matches!(synth_dataset(&mut rng, 3, 7, 3), Err(Error::TooSmall(7))));
        assert!(synth_dataset(&mut rng, 3, 16, 1).is_err());
        assert!(synth_dataset(&mut rng, 3, 16, 11).is_err());
    }

    #[test]
    fn synth_balances_classes() {
        let ds = synth_dataset(&mut RngState::new(2), 300, 16, 3).unwrap();
        assert!(ds.class_histogram().iter().all(|&c| c >= 60));
        assert!(ds.samples().iter().all(|(img, _)| img.is_within_unit_box()));
    }

    #[test]
    fn hr_source_keeps_content_at_scale() {
        let mut rng = RngState::new(4);
        let ds = synth_dataset(&mut rng, 1, 16, 2).unwrap();
        let lr = &ds.samples()[0].0;
        let hr = hr_source(lr, 3, 0.01, &mut rng).unwrap();
        assert_eq!(hr.shape(), Shape::new(48, 48, 1));
        assert!(hr.is_within_unit_box());
        assert!((hr.get(25, 25, 0) - lr.get(8, 8, 0)).abs() < 0.2);
    }

    #[test]
    fn dataset_rejects_bad_labels_and_mixed_shapes() {
        let a = Image::zeros(Shape::new(2, 2, 1));
        let b = Image::zeros(Shape::new(3, 2, 1));
        assert!(matches!(Dataset::new(vec![(a.clone(), 2)], 2), Err(Error::InvalidLabel { .. })));
        assert!(matches!(Dataset::new(vec![(a, 0), (b, 1)], 2), Err(Error::ShapeMismatch { .. })));
    }
}

//! Dense row-major, channel-last image grids.
//!
//! [`Image`] holds intensities (nominally in `[0, 1]`), [`DiffImage`] holds
//! signed perturbation and noise fields of the same layout. Both deref to
//! [`Grid`], which carries the storage and the shared element-wise helpers.

use std::fmt;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Same spatial size, different channel count.
    pub const fn with_channels(&self, channels: usize) -> Self {
        Self { height: self.height, width: self.width, channels }
    }

    #[inline]
    pub const fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    pub fn ensure_eq(&self, found: Shape) -> Result<()> {
        if *self == found {
            Ok(())
        } else {
            Err(Error::ShapeMismatch { expected: *self, found })
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Shape-tagged storage shared by [`Image`] and [`DiffImage`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    shape: Shape,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match shape {shape} ({} entries)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.shape.index(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let i = self.shape.index(row, col, channel);
        self.data[i] = value;
    }

    pub fn dot(&self, other: &Grid) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Extracts one channel as a single-channel grid.
    pub fn channel(&self, channel: usize) -> Grid {
        let shape = self.shape.with_channels(1);
        let data = self.data.iter().skip(channel).step_by(self.shape.channels).copied().collect();
        Grid { shape, data }
    }
}

/// An intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Grid);

/// A signed field shaped like an image (perturbations, noise, gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffImage(Grid);

macro_rules! grid_newtype {
    ($name:ident) => {
        impl $name {
            pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
                Grid::new(shape, data).map(Self)
            }

            pub fn zeros(shape: Shape) -> Self {
                Self(Grid::zeros(shape))
            }

            pub fn filled(shape: Shape, value: f64) -> Self {
                Self(Grid::filled(shape, value))
            }

            pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
                let mut data = Vec::with_capacity(shape.len());
                for r in 0..shape.height {
                    for c in 0..shape.width {
                        for ch in 0..shape.channels {
                            data.push(f(r, c, ch));
                        }
                    }
                }
                Self(Grid { shape, data })
            }

            pub fn grid(&self) -> &Grid {
                &self.0
            }

            pub fn into_grid(self) -> Grid {
                self.0
            }

            pub fn channel_grid(&self, channel: usize) -> Self {
                Self(self.0.channel(channel))
            }
        }

        impl Deref for $name {
            type Target = Grid;
            fn deref(&self) -> &Grid {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut Grid {
                &mut self.0
            }
        }

        impl From<Grid> for $name {
            fn from(grid: Grid) -> Self {
                Self(grid)
            }
        }
    };
}

grid_newtype!(Image);
grid_newtype!(DiffImage);

impl Image {
    pub fn clamp01(&self) -> Image {
        let mut out = self.clone();
        out.clamp01_in_place();
        out
    }

    pub fn clamp01_in_place(&mut self) {
        for v in self.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// `self - other` as a signed field.
    pub fn diff(&self, other: &Image) -> Result<DiffImage> {
        other.shape().ensure_eq(self.shape())?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        DiffImage::new(self.shape(), data)
    }

    /// `self + d` without clamping.
    pub fn add(&self, d: &DiffImage) -> Result<Image> {
        self.shape().ensure_eq(d.shape())?;
        let data = self.data().iter().zip(d.data()).map(|(a, b)| a + b).collect();
        Image::new(self.shape(), data)
    }

    pub fn add_scaled(&self, d: &DiffImage, s: f64) -> Result<Image> {
        self.shape().ensure_eq(d.shape())?;
        let data = self.data().iter().zip(d.data()).map(|(a, b)| a + s * b).collect();
        Image::new(self.shape(), data)
    }

    /// Point on the segment `(1 - t) * self + t * other`.
    pub fn lerp(&self, other: &Image, t: f64) -> Image {
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + t * (b - a)).collect();
        Image(Grid { shape: self.shape(), data })
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        let d = self.diff(other)?;
        Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.shape().len().max(1) as f64)
    }

    pub fn is_within_unit_box(&self) -> bool {
        self.data().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

impl DiffImage {
    pub fn scale(&self, s: f64) -> DiffImage {
        let data = self.data().iter().map(|v| v * s).collect();
        DiffImage(Grid { shape: self.shape(), data })
    }

    pub fn add_assign_scaled(&mut self, other: &DiffImage, s: f64) {
        for (a, b) in self.data_mut().iter_mut().zip(other.data()) {
            *a += s * b;
        }
    }

    /// Normalizes to unit l2 norm; returns `None` for a zero field.
    pub fn normalized(&self) -> Option<DiffImage> {
        let n = l2_norm(self);
        (n > 0.0 && n.is_finite()).then(|| self.scale(1.0 / n))
    }
}

pub fn l2_norm(d: &DiffImage) -> f64 {
    d.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// l2 norm divided by the scaling ratio, so perturbations on inputs of
/// different resolution can be compared.
pub fn scaled_l2(d: &DiffImage, beta: f64) -> Result<f64> {
    if !(beta >= 1.0) {
        return Err(Error::InvalidRatio(beta));
    }
    Ok(l2_norm(d) / beta)
}

pub fn linf_norm(d: &DiffImage) -> f64 {
    d.data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(data: Vec<f64>) -> DiffImage {
        let n = data.len();
        DiffImage::new(Shape::new(1, n, 1), data).unwrap()
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_norm(&DiffImage::zeros(Shape::new(3, 3, 1))), 0.0);
        assert_eq!(l2_norm(&field(vec![0.0, 1.0, 0.0])), 1.0);
        let d = DiffImage::new(Shape::new(2, 2, 1), vec![0.3, 0.4, 0.0, 0.0]).unwrap();
        assert!((l2_norm(&d) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scaled_l2_examples() {
        let six = field(vec![6.0]);
        assert_eq!(scaled_l2(&six, 3.0).unwrap(), 2.0);
        assert_eq!(scaled_l2(&field(vec![0.0]), 4.0).unwrap(), 0.0);
        assert_eq!(scaled_l2(&field(vec![3.0, 4.0]), 1.0).unwrap(), 5.0);
        assert!(matches!(scaled_l2(&six, 0.5), Err(Error::InvalidRatio(_))));
        assert!(scaled_l2(&six, f64::NAN).is_err());
    }

    #[test]
    fn linf_examples() {
        assert_eq!(linf_norm(&field(vec![0.0, 0.0])), 0.0);
        assert_eq!(linf_norm(&field(vec![-0.2, 0.1])), 0.2);
        assert_eq!(linf_norm(&field(vec![0.05, -0.30, 0.10])), 0.30);
    }

    #[test]
    fn data_length_must_match_shape() {
        assert!(Image::new(Shape::new(2, 2, 3), vec![0.0; 11]).is_err());
        assert!(Image::new(Shape::new(2, 2, 3), vec![0.0; 12]).is_ok());
    }

    #[test]
    fn clamp_bounds_every_entry() {
        let img = Image::new(Shape::new(1, 4, 1), vec![-0.5, 0.2, 1.7, f64::INFINITY]).unwrap();
        let c = img.clamp01();
        assert_eq!(c.data(), &[0.0, 0.2, 1.0, 1.0]);
        assert!(c.is_within_unit_box());
    }

    #[test]
    fn channel_extraction_is_strided() {
        let img = Image::from_fn(Shape::new(2, 2, 3), |r, c, ch| (r * 100 + c * 10 + ch) as f64);
        let g = img.channel_grid(2);
        assert_eq!(g.data(), &[2.0, 12.0, 102.0, 112.0]);
    }

    proptest! {
        #[test]
        fn norm_axioms(a in prop::collection::vec(-2.0f64..2.0, 12), b in prop::collection::vec(-2.0f64..2.0, 12)) {
            let (x, y) = (field(a.clone()), field(b.clone()));
            let sum = field(a.iter().zip(&b).map(|(p, q)| p + q).collect());
            prop_assert!(l2_norm(&x) >= 0.0);
            prop_assert!(linf_norm(&x) >= 0.0);
            prop_assert!(l2_norm(&sum) <= l2_norm(&x) + l2_norm(&y) + 1e-12);
            prop_assert!(linf_norm(&sum) <= linf_norm(&x) + linf_norm(&y) + 1e-12);
            prop_assert_eq!(l2_norm(&x) == 0.0, a.iter().all(|v| *v == 0.0));
            prop_assert_eq!(linf_norm(&x) == 0.0, a.iter().all(|v| *v == 0.0));
        }

        #[test]
        fn scaled_l2_times_beta_is_l2(a in prop::collection::vec(-1.0f64..1.0, 8), beta in 1.0f64..8.0) {
            let d = field(a);
            let s = scaled_l2(&d, beta).unwrap();
            prop_assert!((s * beta - l2_norm(&d)).abs() <= 1e-12 * l2_norm(&d).max(1.0));
        }
    }
}

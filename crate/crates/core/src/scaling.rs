//! Separable image resampling.
//!
//! Every scaler here is linear and separable: output pixel `(i, j)` is
//! `Σ_{a,b} wv[i][a] · wh[j][b] · S[a, b]`, where `wv`/`wh` are per-axis tap
//! lists. The same operator is available in three forms:
//!
//! * [`scale`] evaluates it as a windowed 2-D correlation, one output pixel
//!   at a time;
//! * [`build_matrices`] returns the dense coefficient matrices `(L, R)` with
//!   `scale(S) = L · S · R` per channel;
//! * [`adjoint_scale`] applies the transpose, which is what gradients and
//!   LR-subspace noise need.
//!
//! Nearest and bilinear kernels use the half-pixel-center mapping
//! `src = (i + 0.5) · β − 0.5` with a fixed support of one or two source
//! pixels per axis, independent of `β`. That fixed width is what leaves most
//! source pixels without influence on the output. Area scaling averages the
//! whole `β × β` footprint uniformly.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::image::{DiffImage, Grid, Image, Shape};

/// Ridge added to the Gram matrices when forming pseudo-inverses.
pub const PINV_RIDGE: f64 = 1e-10;
/// Magnitude above which an entry of the pseudo-inverse solution marks a pixel vulnerable.
pub const MASK_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScalerKind {
    Nearest,
    Bilinear,
    Area,
}

impl ScalerKind {
    pub const ALL: [ScalerKind; 3] = [ScalerKind::Nearest, ScalerKind::Bilinear, ScalerKind::Area];

    pub fn name(self) -> &'static str {
        match self {
            ScalerKind::Nearest => "nearest",
            ScalerKind::Bilinear => "bilinear",
            ScalerKind::Area => "area",
        }
    }
}

impl fmt::Display for ScalerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScalerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nearest" => Ok(ScalerKind::Nearest),
            "bilinear" | "linear" => Ok(ScalerKind::Bilinear),
            "area" => Ok(ScalerKind::Area),
            other => Err(Error::InvalidArgument(format!("unknown scaler kind {other:?}"))),
        }
    }
}

/// Sparse per-axis weights: `taps[i]` lists `(source index, weight)` for output `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisTaps {
    in_len: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisTaps {
    pub fn new(kind: ScalerKind, in_len: usize, out_len: usize) -> Self {
        let beta = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|i| match kind {
                ScalerKind::Nearest => {
                    let src = (i as f64 + 0.5) * beta - 0.5;
                    let idx = ((src + 0.5).floor().max(0.0) as usize).min(in_len - 1);
                    vec![(idx, 1.0)]
                }
                ScalerKind::Bilinear => {
                    let src = ((i as f64 + 0.5) * beta - 0.5).max(0.0);
                    let mut x0 = src.floor() as usize;
                    let mut frac = src - x0 as f64;
                    if x0 >= in_len - 1 {
                        x0 = in_len - 1;
                        frac = 0.0;
                    }
                    if frac == 0.0 {
                        vec![(x0, 1.0)]
                    } else {
                        vec![(x0, 1.0 - frac), (x0 + 1, frac)]
                    }
                }
                ScalerKind::Area => {
                    let lo = i as f64 * beta;
                    let hi = (i as f64 + 1.0) * beta;
                    let first = lo.floor() as usize;
                    let last = (hi.ceil() as usize).min(in_len);
                    let mut taps: Vec<(usize, f64)> = (first..last)
                        .filter_map(|j| {
                            let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                            (overlap > 1e-12).then_some((j, overlap))
                        })
                        .collect();
                    let total: f64 = taps.iter().map(|t| t.1).sum();
                    for t in &mut taps {
                        t.1 /= total;
                    }
                    taps
                }
            })
            .collect();
        Self { in_len, taps }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    pub fn taps(&self, out_index: usize) -> &[(usize, f64)] {
        &self.taps[out_index]
    }

    /// Dense `out_len × in_len` weight matrix.
    pub fn dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.out_len(), self.in_len);
        for (i, taps) in self.taps.iter().enumerate() {
            for &(j, w) in taps {
                m[(i, j)] += w;
            }
        }
        m
    }
}

/// A separable linear resampler between two spatial sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    rows: AxisTaps,
    cols: AxisTaps,
}

impl Resampler {
    pub fn new(kind: ScalerKind, in_hw: (usize, usize), out_hw: (usize, usize)) -> Result<Self> {
        if in_hw.0 == 0 || in_hw.1 == 0 || out_hw.0 == 0 || out_hw.1 == 0 {
            return Err(Error::InvalidArgument(format!("empty resampling shape {in_hw:?} -> {out_hw:?}")));
        }
        Ok(Self { rows: AxisTaps::new(kind, in_hw.0, out_hw.0), cols: AxisTaps::new(kind, in_hw.1, out_hw.1) })
    }

    pub fn in_hw(&self) -> (usize, usize) {
        (self.rows.in_len(), self.cols.in_len())
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.rows.out_len(), self.cols.out_len())
    }

    pub fn row_taps(&self) -> &AxisTaps {
        &self.rows
    }

    pub fn col_taps(&self) -> &AxisTaps {
        &self.cols
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        let (h, w) = self.in_hw();
        Shape::new(h, w, shape.channels).ensure_eq(shape)
    }

    fn check_output(&self, shape: Shape) -> Result<()> {
        let (h, w) = self.out_hw();
        Shape::new(h, w, shape.channels).ensure_eq(shape)
    }

    /// Forward pass as a windowed correlation: each output pixel gathers its
    /// 2-D footprint (the outer product of the row and column taps).
    pub fn forward(&self, input: &Grid) -> Result<Grid> {
        self.check_input(input.shape())?;
        let ch = input.channels();
        let (oh, ow) = self.out_hw();
        let out_shape = Shape::new(oh, ow, ch);
        let src = input.data();
        let in_w = input.width();
        let mut out = vec![0.0; out_shape.len()];
        let mut acc = vec![0.0; ch];
        for i in 0..oh {
            let rtaps = self.rows.taps(i);
            for j in 0..ow {
                let ctaps = self.cols.taps(j);
                acc.iter_mut().for_each(|a| *a = 0.0);
                for &(a, wa) in rtaps {
                    for &(b, wb) in ctaps {
                        let w = wa * wb;
                        let base = (a * in_w + b) * ch;
                        for (k, v) in acc.iter_mut().enumerate() {
                            *v += w * src[base + k];
                        }
                    }
                }
                let base = (i * ow + j) * ch;
                out[base..base + ch].copy_from_slice(&acc);
            }
        }
        Grid::new(out_shape, out)
    }

    /// Transpose of [`Resampler::forward`]: scatters each output value back
    /// over its footprint.
    pub fn adjoint(&self, output: &Grid) -> Result<Grid> {
        self.check_output(output.shape())?;
        let ch = output.channels();
        let (ih, iw) = self.in_hw();
        let (oh, ow) = self.out_hw();
        let mut out = vec![0.0; ih * iw * ch];
        let y = output.data();
        for i in 0..oh {
            let rtaps = self.rows.taps(i);
            for j in 0..ow {
                let ctaps = self.cols.taps(j);
                let ybase = (i * ow + j) * ch;
                for &(a, wa) in rtaps {
                    for &(b, wb) in ctaps {
                        let w = wa * wb;
                        let base = (a * iw + b) * ch;
                        for k in 0..ch {
                            out[base + k] += w * y[ybase + k];
                        }
                    }
                }
            }
        }
        Grid::new(Shape::new(ih, iw, ch), out)
    }
}

/// A downscaling algorithm bound to fixed input and output sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalerSpec {
    kind: ScalerKind,
    resampler: Resampler,
}

impl ScalerSpec {
    /// `in_hw = (m, n)`, `out_hw = (p, q)`; both per-axis ratios must be ≥ 1.
    pub fn new(kind: ScalerKind, in_hw: (usize, usize), out_hw: (usize, usize)) -> Result<Self> {
        let resampler = Resampler::new(kind, in_hw, out_hw)?;
        let spec = Self { kind, resampler };
        for beta in [spec.beta_v(), spec.beta_h()] {
            if beta < 1.0 {
                return Err(Error::InvalidRatio(beta));
            }
        }
        Ok(spec)
    }

    /// Square downscaling by an integer ratio: `out_hw · beta → out_hw`.
    pub fn with_ratio(kind: ScalerKind, out_hw: (usize, usize), beta: usize) -> Result<Self> {
        Self::new(kind, (out_hw.0 * beta, out_hw.1 * beta), out_hw)
    }

    pub fn identity(kind: ScalerKind, hw: (usize, usize)) -> Result<Self> {
        Self::new(kind, hw, hw)
    }

    pub fn kind(&self) -> ScalerKind {
        self.kind
    }

    pub fn in_hw(&self) -> (usize, usize) {
        self.resampler.in_hw()
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.resampler.out_hw()
    }

    pub fn in_shape(&self, channels: usize) -> Shape {
        let (h, w) = self.in_hw();
        Shape::new(h, w, channels)
    }

    pub fn out_shape(&self, channels: usize) -> Shape {
        let (h, w) = self.out_hw();
        Shape::new(h, w, channels)
    }

    /// Vertical ratio `m / p`.
    pub fn beta_v(&self) -> f64 {
        self.in_hw().0 as f64 / self.out_hw().0 as f64
    }

    /// Horizontal ratio `n / q`.
    pub fn beta_h(&self) -> f64 {
        self.in_hw().1 as f64 / self.out_hw().1 as f64
    }

    pub fn beta(&self) -> f64 {
        self.beta_v().min(self.beta_h())
    }

    pub fn resampler(&self) -> &Resampler {
        &self.resampler
    }
}

/// `scale(S)`; channels are processed independently and no clamping is applied.
pub fn scale(spec: &ScalerSpec, img: &Image) -> Result<Image> {
    spec.resampler.forward(img).map(Image::from)
}

/// Scales a signed field (the operator is linear, so this is the same map).
pub fn scale_diff(spec: &ScalerSpec, d: &DiffImage) -> Result<DiffImage> {
    spec.resampler.forward(d).map(DiffImage::from)
}

/// `Aᵀ · d_lr`, where `A` is the flattened linear operator of [`scale`].
pub fn adjoint_scale(spec: &ScalerSpec, d_lr: &DiffImage) -> Result<DiffImage> {
    spec.resampler.adjoint(d_lr).map(DiffImage::from)
}

/// Dense coefficient matrices with `scale(S) = L · S · R` for every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrices {
    /// `p × m`
    pub l: DMatrix<f64>,
    /// `n × q`
    pub r: DMatrix<f64>,
}

impl CoefficientMatrices {
    pub fn in_hw(&self) -> (usize, usize) {
        (self.l.ncols(), self.r.nrows())
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.l.nrows(), self.r.ncols())
    }

    /// `L · S · R` applied channel by channel.
    pub fn apply(&self, img: &Grid) -> Result<Grid> {
        let (m, n) = self.in_hw();
        let ch = img.channels();
        Shape::new(m, n, ch).ensure_eq(img.shape())?;
        let (p, q) = self.out_hw();
        let mut out = vec![0.0; p * q * ch];
        for c in 0..ch {
            let s = DMatrix::from_fn(m, n, |i, j| img.get(i, j, c));
            let d = &self.l * s * &self.r;
            for i in 0..p {
                for j in 0..q {
                    out[(i * q + j) * ch + c] = d[(i, j)];
                }
            }
        }
        Grid::new(Shape::new(p, q, ch), out)
    }

    /// `S* = L⁺ · 1_{p×q} · R⁺`: the per-pixel weight recovered by solving
    /// for an input that scales to an all-ones output.
    pub fn pinv_weights(&self) -> DMatrix<f64> {
        let (p, q) = self.out_hw();
        pinv_wide(&self.l) * DMatrix::from_element(p, q, 1.0) * pinv_tall(&self.r)
    }
}

fn solve_spd(gram: DMatrix<f64>, rhs: DMatrix<f64>) -> DMatrix<f64> {
    match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram.lu().solve(&rhs).expect("ridge-regularized Gram matrix is invertible"),
    }
}

/// Pseudo-inverse of a wide (`p ≤ m`) matrix: `Aᵀ (A Aᵀ + λI)⁻¹`.
pub fn pinv_wide(a: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = a * a.transpose() + DMatrix::identity(a.nrows(), a.nrows()) * PINV_RIDGE;
    // (A Aᵀ + λI)⁻¹ is symmetric, so solve for its product with A and transpose.
    solve_spd(gram, a.clone()).transpose()
}

/// Pseudo-inverse of a tall (`n ≥ q`) matrix: `(Aᵀ A + λI)⁻¹ Aᵀ`.
pub fn pinv_tall(a: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = a.transpose() * a + DMatrix::identity(a.ncols(), a.ncols()) * PINV_RIDGE;
    solve_spd(gram, a.transpose())
}

pub fn build_matrices(spec: &ScalerSpec) -> CoefficientMatrices {
    CoefficientMatrices { l: spec.resampler.rows.dense(), r: spec.resampler.cols.dense().transpose() }
}

/// Residual bound for extracted matrices on random probes.
pub const EXTRACT_TOLERANCE: f64 = 1e-6;

/// Recovers `(L, R)` from a black-box scaler using `m + n + 1` structured
/// probes plus a few random verification probes.
///
/// A probe that is one on row `i` of the input scales to `L[:, i] · r̄ᵀ`
/// (`r̄` = column sums of `R`), and one that is one on column `j` scales to
/// `l̄ · R[j, :]` (`l̄` = row sums of `L`). Fixing the gauge with `l̄ = 1`
/// (kernel normalization) determines both factors. The recovered operator is
/// then checked on random inputs; a residual above [`EXTRACT_TOLERANCE`]
/// means the black box is not a separable linear map.
pub fn extract_matrices(
    mut blackbox: impl FnMut(&Image) -> Image,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
) -> Result<CoefficientMatrices> {
    let (m, n) = in_hw;
    let (p, q) = out_hw;
    let in_shape = Shape::new(m, n, 1);
    let out_shape = Shape::new(p, q, 1);
    let mut probe = |img: &Image| -> Result<Image> {
        let d = blackbox(img);
        out_shape.ensure_eq(d.shape())?;
        Ok(d)
    };

    let mut r = DMatrix::zeros(n, q);
    for j in 0..n {
        let d = probe(&Image::from_fn(in_shape, |_, c, _| f64::from(u8::from(c == j))))?;
        for k in 0..q {
            r[(j, k)] = (0..p).map(|i| d.get(i, k, 0)).sum::<f64>() / p as f64;
        }
    }
    let rbar: Vec<f64> = (0..q).map(|k| (0..n).map(|j| r[(j, k)]).sum()).collect();
    let rbar_sq: f64 = rbar.iter().map(|v| v * v).sum();
    if rbar_sq <= f64::EPSILON {
        return Err(Error::Nonlinear { residual: f64::INFINITY, tolerance: EXTRACT_TOLERANCE });
    }
    let mut l = DMatrix::zeros(p, m);
    for a in 0..m {
        let d = probe(&Image::from_fn(in_shape, |row, _, _| f64::from(u8::from(row == a))))?;
        for i in 0..p {
            l[(i, a)] = (0..q).map(|k| d.get(i, k, 0) * rbar[k]).sum::<f64>() / rbar_sq;
        }
    }
    let extracted = CoefficientMatrices { l, r };

    // verification probes, deterministic
    let mut residual = 0.0f64;
    for t in 0..3u64 {
        let mut state = 0x2545_F491_4F6C_DD1D_u64 ^ (t + 1);
        let s = Image::from_fn(in_shape, |_, _, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        });
        let want = probe(&s)?;
        let got = extracted.apply(&s)?;
        for (a, b) in want.data().iter().zip(got.data()) {
            residual = residual.max((a - b).abs());
        }
    }
    if !(residual <= EXTRACT_TOLERANCE) {
        return Err(Error::Nonlinear { residual, tolerance: EXTRACT_TOLERANCE });
    }
    Ok(extracted)
}

/// Boolean grid over the scaler's input; `true` marks a vulnerable pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VulnerabilityMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl VulnerabilityMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::InvalidArgument(format!("mask of {} bits for {height}x{width}", bits.len())));
        }
        Ok(Self { height, width, bits })
    }

    pub fn full(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, bits: vec![value; height * width] }
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len().max(1) as f64
    }

    /// Mask as a grayscale image (vulnerable = 1), e.g. for PPM export.
    pub fn to_image(&self) -> Image {
        Image::from_fn(Shape::new(self.height, self.width, 1), |r, c, _| f64::from(u8::from(self.get(r, c))))
    }

    pub fn check_hw(&self, shape: Shape) -> Result<()> {
        let own = Shape::new(self.height, self.width, shape.channels);
        own.ensure_eq(shape)
    }
}

pub fn identify_mask(spec: &ScalerSpec) -> VulnerabilityMask {
    let weights = build_matrices(spec).pinv_weights();
    let (m, n) = spec.in_hw();
    let bits = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| weights[(i, j)].abs() > MASK_THRESHOLD).collect();
    VulnerabilityMask { height: m, width: n, bits }
}

/// Uniform `β × β` averaging kernel of area scaling.
pub fn area_kernel(beta: f64) -> Result<Vec<Vec<f64>>> {
    if beta < 1.0 || beta.fract() != 0.0 || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("area kernel needs an integer ratio >= 1, got {beta}")));
    }
    let b = beta as usize;
    Ok(vec![vec![1.0 / (beta * beta); b]; b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn random_image(rng: &mut RngState, shape: Shape) -> Image {
        Image::from_fn(shape, |_, _, _| rng.uniform())
    }

    fn one_channel(h: usize, w: usize, data: Vec<f64>) -> Image {
        Image::new(Shape::new(h, w, 1), data).unwrap()
    }

    #[test]
    fn identity_spec_leaves_image_unchanged() {
        let mut rng = RngState::new(1);
        for kind in ScalerKind::ALL {
            let spec = ScalerSpec::identity(kind, (5, 7)).unwrap();
            let img = random_image(&mut rng, Shape::new(5, 7, 3));
            assert_eq!(scale(&spec, &img).unwrap(), img, "{kind}");
            let m = build_matrices(&spec);
            assert_eq!(m.l, DMatrix::identity(5, 5));
            assert_eq!(m.r, DMatrix::identity(7, 7));
        }
    }

    #[test]
    fn area_and_nearest_two_by_two() {
        let area = ScalerSpec::new(ScalerKind::Area, (2, 2), (1, 1)).unwrap();
        let out = scale(&area, &one_channel(2, 2, vec![0.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[0.75]);
        let m = build_matrices(&area);
        assert_eq!(m.l.as_slice(), &[0.5, 0.5]);
        assert_eq!(m.r.as_slice(), &[0.5, 0.5]);

        let nearest = ScalerSpec::new(ScalerKind::Nearest, (2, 2), (1, 1)).unwrap();
        let out = scale(&nearest, &one_channel(2, 2, vec![0.1, 0.2, 0.3, 0.4])).unwrap();
        assert_eq!(out.data(), &[0.4]);
    }

    #[test]
    fn bilinear_support_is_fixed_width() {
        // β = 4: source coordinate 1.5 → taps at 1 and 2 with equal weight.
        let taps = AxisTaps::new(ScalerKind::Bilinear, 8, 2);
        assert_eq!(taps.taps(0), &[(1, 0.5), (2, 0.5)]);
        assert_eq!(taps.taps(1), &[(5, 0.5), (6, 0.5)]);
        // β = 3 lands exactly on a source pixel.
        let taps = AxisTaps::new(ScalerKind::Bilinear, 9, 3);
        assert_eq!(taps.taps(1), &[(4, 1.0)]);
    }

    #[test]
    fn area_handles_fractional_ratio() {
        let taps = AxisTaps::new(ScalerKind::Area, 5, 2);
        let t0 = taps.taps(0);
        assert_eq!(t0.len(), 3);
        assert!((t0[2].1 - 0.2).abs() < 1e-12);
        assert!((t0.iter().map(|t| t.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rows_and_columns_are_normalized() {
        for kind in ScalerKind::ALL {
            for (in_hw, out_hw) in [((12, 9), (4, 3)), ((17, 11), (5, 4)), ((8, 8), (8, 8))] {
                let m = build_matrices(&ScalerSpec::new(kind, in_hw, out_hw).unwrap());
                for row in m.l.row_iter() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                }
                for col in m.r.column_iter() {
                    assert!((col.sum() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matrix_form_matches_correlation_form() {
        let mut rng = RngState::new(11);
        for kind in ScalerKind::ALL {
            for (in_hw, out_hw) in [((12, 12), (4, 4)), ((13, 10), (4, 3)), ((16, 8), (4, 4))] {
                let spec = ScalerSpec::new(kind, in_hw, out_hw).unwrap();
                let m = build_matrices(&spec);
                for _ in 0..10 {
                    let s = random_image(&mut rng, spec.in_shape(3));
                    let direct = scale(&spec, &s).unwrap();
                    let via = m.apply(&s).unwrap();
                    let err = direct.data().iter().zip(via.data()).fold(0.0f64, |e, (a, b)| e.max((a - b).abs()));
                    assert!(err <= 1e-9, "{kind} {in_hw:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn adjoint_of_area_is_uniform_spread() {
        let spec = ScalerSpec::new(ScalerKind::Area, (2, 2), (1, 1)).unwrap();
        let y = DiffImage::new(Shape::new(1, 1, 1), vec![1.0]).unwrap();
        assert_eq!(adjoint_scale(&spec, &y).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn adjoint_identity_holds() {
        let mut rng = RngState::new(5);
        for kind in ScalerKind::ALL {
            let spec = ScalerSpec::new(kind, (15, 12), (5, 3)).unwrap();
            for _ in 0..50 {
                let x = DiffImage::from_fn(spec.in_shape(2), |_, _, _| rng.normal());
                let y = DiffImage::from_fn(spec.out_shape(2), |_, _, _| rng.normal());
                let lhs = scale_diff(&spec, &x).unwrap().dot(&y);
                let rhs = x.dot(&adjoint_scale(&spec, &y).unwrap());
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-300), "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn shape_errors() {
        let spec = ScalerSpec::new(ScalerKind::Area, (4, 4), (2, 2)).unwrap();
        assert!(matches!(scale(&spec, &Image::zeros(Shape::new(3, 4, 1))), Err(Error::ShapeMismatch { .. })));
        assert!(adjoint_scale(&spec, &DiffImage::zeros(Shape::new(4, 4, 1))).is_err());
        assert!(matches!(ScalerSpec::new(ScalerKind::Area, (4, 4), (8, 2)), Err(Error::InvalidRatio(_))));
    }

    #[test]
    fn extract_recovers_builtin_matrices() {
        for kind in ScalerKind::ALL {
            let spec = ScalerSpec::new(kind, (8, 12), (4, 4)).unwrap();
            let got = extract_matrices(|img| scale(&spec, img).unwrap(), (8, 12), (4, 4)).unwrap();
            let want = build_matrices(&spec);
            assert!((got.l - want.l).amax() <= 1e-6, "{kind}");
            assert!((got.r - want.r).amax() <= 1e-6, "{kind}");
        }
        let id = extract_matrices(|img| img.clone(), (3, 5), (3, 5)).unwrap();
        assert!((id.l - DMatrix::<f64>::identity(3, 3)).amax() <= 1e-6);
        assert!((id.r - DMatrix::<f64>::identity(5, 5)).amax() <= 1e-6);
    }

    #[test]
    fn extract_detects_nonlinearity() {
        let spec = ScalerSpec::new(ScalerKind::Area, (4, 4), (2, 2)).unwrap();
        let clamped = |img: &Image| {
            let mut d = scale(&spec, img).unwrap();
            d.data_mut().iter_mut().for_each(|v| *v = v.min(0.5));
            d
        };
        assert!(matches!(extract_matrices(clamped, (4, 4), (2, 2)), Err(Error::Nonlinear { .. })));
    }

    #[test]
    fn mask_examples() {
        let id = identify_mask(&ScalerSpec::identity(ScalerKind::Bilinear, (4, 4)).unwrap());
        assert_eq!(id.count(), 16);
        let nearest = identify_mask(&ScalerSpec::new(ScalerKind::Nearest, (4, 4), (2, 2)).unwrap());
        for bi in 0..2 {
            for bj in 0..2 {
                let hits = (0..2).flat_map(|i| (0..2).map(move |j| (2 * bi + i, 2 * bj + j))).filter(|&(i, j)| nearest.get(i, j)).count();
                assert_eq!(hits, 1);
            }
        }
        assert_eq!(identify_mask(&ScalerSpec::new(ScalerKind::Area, (12, 12), (4, 4)).unwrap()).fraction(), 1.0);
    }

    #[test]
    fn fixed_width_kernels_leave_pixels_untouched() {
        for beta in [3, 4] {
            for kind in [ScalerKind::Nearest, ScalerKind::Bilinear] {
                let spec = ScalerSpec::with_ratio(kind, (5, 5), beta).unwrap();
                assert!(identify_mask(&spec).fraction() < 1.0);
            }
            let area = ScalerSpec::with_ratio(ScalerKind::Area, (5, 5), beta).unwrap();
            assert_eq!(identify_mask(&area).fraction(), 1.0);
        }
    }

    #[test]
    fn area_kernel_examples() {
        assert_eq!(area_kernel(1.0).unwrap(), vec![vec![1.0]]);
        assert_eq!(area_kernel(2.0).unwrap(), vec![vec![0.25; 2]; 2]);
        let k3 = area_kernel(3.0).unwrap();
        assert!((k3.iter().flatten().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(area_kernel(2.5).is_err());
        assert!(area_kernel(0.0).is_err());
    }
}

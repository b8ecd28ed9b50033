//! Median and randomized filtering restricted to vulnerable pixels, modeled as
//! a masked pooling layer: `defense(x) = p(x)·mask + x·(1 − mask)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::{DiffImage, Grid, Image};
use crate::rng::RngState;
use crate::scaling::{identify_mask, ScalerSpec, VulnerabilityMask};

/// Default number of Monte-Carlo draws for the expected randomized defense.
pub const DEFAULT_EOT_SAMPLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PreventionKind {
    Median,
    Randomized,
}

impl fmt::Display for PreventionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PreventionKind::Median => "median",
            PreventionKind::Randomized => "randomized",
        })
    }
}

impl FromStr for PreventionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "median" => Ok(PreventionKind::Median),
            "randomized" | "random" => Ok(PreventionKind::Randomized),
            other => Err(Error::InvalidArgument(format!("unknown prevention defense {other:?}"))),
        }
    }
}

/// Reflect (mirror without edge repeat) index into `0..len`.
#[inline]
pub fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= len as isize {
        k = period - k;
    }
    k as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreventionSpec {
    kind: PreventionKind,
    window: (usize, usize),
    mask: VulnerabilityMask,
}

impl PreventionSpec {
    pub fn new(kind: PreventionKind, window: (usize, usize), mask: VulnerabilityMask) -> Result<Self> {
        for d in [window.0, window.1] {
            if d < 3 || d % 2 == 0 {
                return Err(Error::InvalidArgument(format!("window {window:?} must be odd and >= 3")));
            }
        }
        Ok(Self { kind, window, mask })
    }

    /// Defense guarding `scaler`: mask from its vulnerable pixels, a 3×3
    /// window for β ≤ 2 and 5×5 for β in 3..=4 (growing as `2⌈β/2⌉ + 1`).
    pub fn for_scaler(kind: PreventionKind, scaler: &ScalerSpec) -> Result<Self> {
        let half = (scaler.beta() / 2.0).ceil().max(1.0) as usize;
        let w = 2 * half + 1;
        Self::new(kind, (w, w), identify_mask(scaler))
    }

    pub fn kind(&self) -> PreventionKind {
        self.kind
    }

    pub fn window(&self) -> (usize, usize) {
        self.window
    }

    pub fn mask(&self) -> &VulnerabilityMask {
        &self.mask
    }

    pub fn with_kind(&self, kind: PreventionKind) -> Self {
        Self { kind, ..self.clone() }
    }

    /// Pixel indices (row-major, spatial only) of the window centered at `(r, c)`.
    pub(crate) fn window_pixels(&self, r: usize, c: usize, out: &mut Vec<usize>) {
        let (h, w) = self.mask.hw();
        let (wh, ww) = self.window;
        out.clear();
        for dr in 0..wh {
            let rr = reflect(r as isize + dr as isize - (wh / 2) as isize, h);
            for dc in 0..ww {
                let cc = reflect(c as isize + dc as isize - (ww / 2) as isize, w);
                out.push(rr * w + cc);
            }
        }
    }

    /// Masked pixel coordinates in row-major order.
    pub(crate) fn masked_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (h, w) = self.mask.hw();
        (0..h).flat_map(move |r| (0..w).map(move |c| (r, c))).filter(|&(r, c)| self.mask.get(r, c))
    }
}

/// Lower median (`values[(n − 1) / 2]` after sorting).
pub fn median_window(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let mut v = values.to_vec();
    let k = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    Ok(*m)
}

/// Position of the lower median; ties resolve to the lowest position holding
/// the median value.
pub fn median_position(values: &[f64]) -> Result<usize> {
    let m = median_window(values)?;
    Ok(values.iter().position(|v| *v == m).expect("median is an element"))
}

/// Source selected for every masked output entry: `(destination, source)`
/// as flat indices into the image data. Unmasked entries pass through.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Routing {
    pairs: Vec<(usize, usize)>,
}

impl Routing {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Vector-Jacobian product of the routed defense.
    pub fn backprop(&self, grad_out: &DiffImage) -> DiffImage {
        let mut grad_in = grad_out.clone();
        {
            let g = grad_in.data_mut();
            for &(dst, _) in &self.pairs {
                g[dst] = 0.0;
            }
        }
        let src = grad_out.data();
        let g = grad_in.data_mut();
        for &(dst, s) in &self.pairs {
            g[s] += src[dst];
        }
        grad_in
    }
}

/// Applies the defense and records which source entry fed each masked output.
/// Median windows route to their median element; randomized windows route to
/// one uniformly drawn window position shared by all channels.
pub fn apply_prevention_traced(spec: &PreventionSpec, img: &Image, rng: &mut RngState) -> Result<(Image, Routing)> {
    spec.mask.check_hw(img.shape())?;
    let ch = img.channels();
    let mut out = img.clone();
    let mut routing = Routing { pairs: Vec::with_capacity(spec.mask.count() * ch) };
    let mut window = Vec::with_capacity(spec.window.0 * spec.window.1);
    let mut values = Vec::with_capacity(window.capacity());
    let src = img.data();
    let width = img.width();
    for (r, c) in spec.masked_pixels() {
        spec.window_pixels(r, c, &mut window);
        match spec.kind {
            PreventionKind::Median => {
                for k in 0..ch {
                    values.clear();
                    values.extend(window.iter().map(|&p| src[p * ch + k]));
                    let pos = median_position(&values)?;
                    let s = window[pos] * ch + k;
                    let d = (r * width + c) * ch + k;
                    out.data_mut()[d] = src[s];
                    routing.pairs.push((d, s));
                }
            }
            PreventionKind::Randomized => {
                let p = window[rng.below(window.len())];
                for k in 0..ch {
                    let s = p * ch + k;
                    let d = (r * width + c) * ch + k;
                    out.data_mut()[d] = src[s];
                    routing.pairs.push((d, s));
                }
            }
        }
    }
    Ok((out, routing))
}

pub fn apply_prevention(spec: &PreventionSpec, img: &Image, rng: &mut RngState) -> Result<Image> {
    apply_prevention_traced(spec, img, rng).map(|(out, _)| out)
}

/// Monte-Carlo mean of `samples` randomized draws.
pub fn expected_defense(spec: &PreventionSpec, img: &Image, rng: &mut RngState, samples: usize) -> Result<Image> {
    if spec.kind != PreventionKind::Randomized {
        return Err(Error::InvalidArgument("expected_defense needs a randomized defense".into()));
    }
    if samples < 1 {
        return Err(Error::InvalidArgument("expected_defense needs at least one sample".into()));
    }
    let mut acc = Grid::zeros(img.shape());
    for _ in 0..samples {
        let draw = apply_prevention(spec, img, rng)?;
        for (a, v) in acc.data_mut().iter_mut().zip(draw.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / samples as f64;
    acc.data_mut().iter_mut().for_each(|a| *a *= inv);
    Ok(Image::from(acc))
}

/// Window mean on masked pixels, identity elsewhere: the expectation of
/// randomized filtering, i.e. an average-pooling layer.
pub fn mean_pool_masked(spec: &PreventionSpec, img: &Image) -> Result<Image> {
    spec.mask.check_hw(img.shape())?;
    let ch = img.channels();
    let width = img.width();
    let mut out = img.clone();
    let mut window = Vec::new();
    let src = img.data();
    for (r, c) in spec.masked_pixels() {
        spec.window_pixels(r, c, &mut window);
        let inv = 1.0 / window.len() as f64;
        for k in 0..ch {
            let s: f64 = window.iter().map(|&p| src[p * ch + k]).sum();
            out.data_mut()[(r * width + c) * ch + k] = s * inv;
        }
    }
    Ok(out)
}

/// Transpose of [`mean_pool_masked`].
pub fn mean_pool_masked_adjoint(spec: &PreventionSpec, grad_out: &DiffImage) -> Result<DiffImage> {
    spec.mask.check_hw(grad_out.shape())?;
    let ch = grad_out.channels();
    let width = grad_out.width();
    let mut grad_in = grad_out.clone();
    for (r, c) in spec.masked_pixels() {
        for k in 0..ch {
            grad_in.data_mut()[(r * width + c) * ch + k] = 0.0;
        }
    }
    let mut window = Vec::new();
    let g = grad_out.data();
    for (r, c) in spec.masked_pixels() {
        spec.window_pixels(r, c, &mut window);
        let inv = 1.0 / window.len() as f64;
        for k in 0..ch {
            let v = g[(r * width + c) * ch + k] * inv;
            for &p in &window {
                grad_in.data_mut()[p * ch + k] += v;
            }
        }
    }
    Ok(grad_in)
}

/// Cached noise model of randomized filtering: `defense(x) ≈ μ(x) + η`, with
/// `μ` the masked window mean and `η` drawn as `draw(x_r) − μ(x_r)` at the
/// last refresh point `x_r`. The noise bank is redrawn every
/// `refresh_interval` calls.
#[derive(Debug, Clone)]
pub struct CachedSampler {
    spec: PreventionSpec,
    mu: Image,
    cached_noise: Vec<DiffImage>,
    refresh_interval: usize,
    counter: usize,
    refreshes: usize,
    sampling_calls: usize,
}

impl CachedSampler {
    pub fn new(spec: PreventionSpec, x: &Image, samples: usize, refresh_interval: usize, rng: &mut RngState) -> Result<Self> {
        if spec.kind != PreventionKind::Randomized {
            return Err(Error::InvalidArgument("cached sampling models randomized filtering".into()));
        }
        if samples < 1 || refresh_interval < 1 {
            return Err(Error::InvalidArgument("cached sampling needs samples >= 1 and interval >= 1".into()));
        }
        let mut s = Self {
            mu: x.clone(),
            spec,
            cached_noise: Vec::with_capacity(samples),
            refresh_interval,
            counter: 0,
            refreshes: 0,
            sampling_calls: 0,
        };
        s.resample(x, samples, rng)?;
        Ok(s)
    }

    /// Builds a sampler around a fixed noise bank (mostly for tests).
    pub fn with_noise(spec: PreventionSpec, x: &Image, noise: Vec<DiffImage>, refresh_interval: usize) -> Result<Self> {
        if noise.is_empty() {
            return Err(Error::InvalidArgument("noise bank is empty".into()));
        }
        for n in &noise {
            x.shape().ensure_eq(n.shape())?;
        }
        Ok(Self {
            mu: mean_pool_masked(&spec, x)?,
            spec,
            cached_noise: noise,
            refresh_interval,
            counter: 0,
            refreshes: 0,
            sampling_calls: 0,
        })
    }

    fn resample(&mut self, x: &Image, samples: usize, rng: &mut RngState) -> Result<()> {
        self.mu = mean_pool_masked(&self.spec, x)?;
        self.cached_noise.clear();
        for _ in 0..samples {
            let draw = apply_prevention(&self.spec, x, rng)?;
            self.sampling_calls += 1;
            self.cached_noise.push(draw.diff(&self.mu)?);
        }
        Ok(())
    }

    /// Advances the call counter, refreshing the noise bank (from `x`) once
    /// `refresh_interval` calls have used the current one.
    pub fn tick(&mut self, x: &Image, rng: &mut RngState) -> Result<()> {
        if self.counter >= self.refresh_interval {
            let n = self.cached_noise.len();
            self.resample(x, n, rng)?;
            self.counter = 0;
            self.refreshes += 1;
        }
        self.counter += 1;
        Ok(())
    }

    /// One defended output `μ(x) + η_k`, cycling through the cached bank.
    pub fn cached_defense(&mut self, x: &Image, rng: &mut RngState) -> Result<Image> {
        self.tick(x, rng)?;
        let k = (self.counter - 1) % self.cached_noise.len();
        mean_pool_masked(&self.spec, x)?.add(&self.cached_noise[k])
    }

    /// All cached outputs `μ(x) + η_i` (no counter change).
    pub fn outputs(&self, x: &Image) -> Result<Vec<Image>> {
        let mu = mean_pool_masked(&self.spec, x)?;
        self.cached_noise.iter().map(|eta| mu.add(eta)).collect()
    }

    /// Vector-Jacobian product; the cached noise is constant.
    pub fn backprop(&self, grad_out: &DiffImage) -> Result<DiffImage> {
        mean_pool_masked_adjoint(&self.spec, grad_out)
    }

    pub fn spec(&self) -> &PreventionSpec {
        &self.spec
    }

    pub fn mu(&self) -> &Image {
        &self.mu
    }

    pub fn cached_noise(&self) -> &[DiffImage] {
        &self.cached_noise
    }

    pub fn refresh_interval(&self) -> usize {
        self.refresh_interval
    }

    pub fn counter(&self) -> usize {
        self.counter
    }

    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    /// Randomized-filter draws performed so far.
    pub fn sampling_calls(&self) -> usize {
        self.sampling_calls
    }
}

//! Desk-scale convolutional classifier with hand-written backpropagation.
//!
//! Architecture: `conv3×3 → relu → avgpool2 → conv3×3 → relu → avgpool2 →
//! dense → softmax`, with zero "same" padding on both convolutions. The model
//! is used as a gradient oracle by the attacks, so the input gradient is the
//! load-bearing part.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{DiffImage, Image, Shape};
use crate::rng::RngState;
use crate::Dataset;

pub const CONV1_FILTERS: usize = 8;
pub const CONV2_FILTERS: usize = 16;

const MODEL_MAGIC: &[u8; 8] = b"SADVMDL\0";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// `−log p_y`
    CrossEntropy,
    /// Untargeted margin `max(z_y − max_{j≠y} z_j + κ, 0)`.
    CwMargin { kappa: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input: Shape,
    class_count: usize,
    params: Vec<f64>,
}

/// Offsets of the parameter tensors inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    c1w: usize,
    c1b: usize,
    c2w: usize,
    c2b: usize,
    dw: usize,
    db: usize,
    total: usize,
    h2: usize,
    w2: usize,
    dense_in: usize,
}

impl Layout {
    fn new(input: Shape, classes: usize) -> Self {
        let cin = input.channels;
        let (h2, w2) = (input.height / 2, input.width / 2);
        let (h4, w4) = (h2 / 2, w2 / 2);
        let dense_in = h4 * w4 * CONV2_FILTERS;
        let c1w = 0;
        let c1b = c1w + 9 * cin * CONV1_FILTERS;
        let c2w = c1b + CONV1_FILTERS;
        let c2b = c2w + 9 * CONV1_FILTERS * CONV2_FILTERS;
        let dw = c2b + CONV2_FILTERS;
        let db = dw + classes * dense_in;
        let total = db + classes;
        Self { c1w, c1b, c2w, c2b, dw, db, total, h2, w2, dense_in }
    }

    fn tensor_shapes(&self, input: Shape, classes: usize) -> Vec<Vec<u32>> {
        let (c, f1, f2) = (input.channels as u32, CONV1_FILTERS as u32, CONV2_FILTERS as u32);
        vec![
            vec![3, 3, c, f1],
            vec![f1],
            vec![3, 3, f1, f2],
            vec![f2],
            vec![classes as u32, self.dense_in as u32],
            vec![classes as u32],
        ]
    }
}

/// Activations kept for the backward pass.
struct Cache {
    a1: Vec<f64>,
    p1: Vec<f64>,
    a2: Vec<f64>,
    p2: Vec<f64>,
    logits: Vec<f64>,
}

/// Same-padded 3×3 convolution; weights laid out `[ky][kx][in][out]`.
fn conv3x3(input: &[f64], h: usize, w: usize, cin: usize, weights: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            o.copy_from_slice(bias);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = &input[(sy as usize * w + sx as usize) * cin..][..cin];
                    let wk = &weights[(ky * 3 + kx) * cin * cout..][..cin * cout];
                    for (i, &v) in src.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        for (acc, &wv) in o.iter_mut().zip(&wk[i * cout..(i + 1) * cout]) {
                            *acc += v * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv3x3`]; accumulates into `dweights`/`dbias` when given
/// and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weights: &[f64],
    cout: usize,
    dout: &[f64],
    mut dparams: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let mut din = vec![0.0; h * w * cin];
    for y in 0..h {
        for x in 0..w {
            let g = &dout[(y * w + x) * cout..][..cout];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            if let Some((_, db)) = dparams.as_mut() {
                for (d, v) in db.iter_mut().zip(g) {
                    *d += v;
                }
            }
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let base = (sy as usize * w + sx as usize) * cin;
                    let koff = (ky * 3 + kx) * cin * cout;
                    for i in 0..cin {
                        let wk = &weights[koff + i * cout..][..cout];
                        din[base + i] += wk.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                        if let Some((dw, _)) = dparams.as_mut() {
                            let v = input[base + i];
                            if v != 0.0 {
                                for (d, gv) in dw[koff + i * cout..][..cout].iter_mut().zip(g) {
                                    *d += v * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// 2×2 average pooling (trailing odd row/column dropped).
fn avgpool2(input: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for k in 0..c {
                let at = |yy: usize, xx: usize| input[(yy * w + xx) * c + k];
                out[(y * ow + x) * c + k] =
                    0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
            }
        }
    }
    out
}

fn avgpool2_backward(dout: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut din = vec![0.0; h * w * c];
    for y in 0..oh {
        for x in 0..ow {
            for k in 0..c {
                let g = 0.25 * dout[(y * ow + x) * c + k];
                for (yy, xx) in [(2 * y, 2 * x), (2 * y, 2 * x + 1), (2 * y + 1, 2 * x), (2 * y + 1, 2 * x + 1)] {
                    din[(yy * w + xx) * c + k] += g;
                }
            }
        }
    }
    din
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    values.iter().enumerate().fold(0, |best, (i, v)| if *v > values[best] { i } else { best })
}

pub fn cross_entropy(probabilities: &[f64], y: usize) -> Result<f64> {
    let p = probabilities.get(y).ok_or(Error::InvalidLabel { label: y, class_count: probabilities.len() })?;
    Ok(-p.max(f64::MIN_POSITIVE).ln())
}

/// Largest logit other than `y`, with its index.
fn runner_up(logits: &[f64], y: usize) -> (usize, f64) {
    logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != y)
        .fold((usize::MAX, f64::NEG_INFINITY), |best, (j, &z)| if z > best.1 { (j, z) } else { best })
}

pub fn cw_margin(logits: &[f64], y: usize, kappa: f64) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::InvalidLabel { label: y, class_count: logits.len() });
    }
    let (_, other) = runner_up(logits, y);
    Ok((logits[y] - other + kappa).max(0.0))
}

/// Loss value and its gradient with respect to the logits.
pub fn loss_and_logit_grad(logits: &[f64], loss: LossKind, y: usize) -> Result<(f64, Vec<f64>)> {
    if y >= logits.len() {
        return Err(Error::InvalidLabel { label: y, class_count: logits.len() });
    }
    match loss {
        LossKind::CrossEntropy => {
            let p = softmax(logits);
            let value = cross_entropy(&p, y)?;
            let mut g = p;
            g[y] -= 1.0;
            Ok((value, g))
        }
        LossKind::CwMargin { kappa } => {
            let (j, other) = runner_up(logits, y);
            let value = (logits[y] - other + kappa).max(0.0);
            let mut g = vec![0.0; logits.len()];
            if value > 0.0 {
                g[y] = 1.0;
                g[j] = -1.0;
            }
            Ok((value, g))
        }
    }
}

impl Model {
    /// Deterministic He-uniform weights and zero biases.
    pub fn init(seed: u64, input: Shape, class_count: usize) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::InvalidArgument("class_count must be positive".into()));
        }
        if input.height < 4 || input.width < 4 || input.channels == 0 {
            return Err(Error::InvalidArgument(format!("input shape {input} too small for two pooling stages")));
        }
        let layout = Layout::new(input, class_count);
        let mut rng = RngState::new(seed);
        let mut params = vec![0.0; layout.total];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.uniform_range(-bound, bound);
            }
        };
        fill(layout.c1w..layout.c1b, 9 * input.channels);
        fill(layout.c2w..layout.c2b, 9 * CONV1_FILTERS);
        fill(layout.dw..layout.db, layout.dense_in);
        // the dense layer feeds a softmax, so keep it smaller than He scaling
        for p in &mut params[layout.dw..layout.db] {
            *p *= 0.5;
        }
        Ok(Self { input, class_count, params })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layout(&self) -> Layout {
        Layout::new(self.input, self.class_count)
    }

    fn run(&self, img: &Image) -> Result<Cache> {
        self.input.ensure_eq(img.shape())?;
        let l = self.layout();
        let (h, w, c) = (self.input.height, self.input.width, self.input.channels);
        let p = &self.params;
        let mut a1 = conv3x3(img.data(), h, w, c, &p[l.c1w..l.c1b], &p[l.c1b..l.c2w], CONV1_FILTERS);
        relu_in_place(&mut a1);
        let p1 = avgpool2(&a1, h, w, CONV1_FILTERS);
        let mut a2 = conv3x3(&p1, l.h2, l.w2, CONV1_FILTERS, &p[l.c2w..l.c2b], &p[l.c2b..l.dw], CONV2_FILTERS);
        relu_in_place(&mut a2);
        let p2 = avgpool2(&a2, l.h2, l.w2, CONV2_FILTERS);
        let logits = (0..self.class_count)
            .map(|k| {
                let row = &p[l.dw + k * l.dense_in..][..l.dense_in];
                p[l.db + k] + row.iter().zip(&p2).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Ok(Cache { a1, p1, a2, p2, logits })
    }

    /// Backpropagates `dlogits`; returns the input gradient and, when
    /// requested, accumulates parameter gradients into `dparams`.
    fn backward(&self, img: &Image, cache: &Cache, dlogits: &[f64], mut dparams: Option<&mut [f64]>) -> Vec<f64> {
        let l = self.layout();
        let (h, w, c) = (self.input.height, self.input.width, self.input.channels);
        let p = &self.params;
        let mut dp2 = vec![0.0; l.dense_in];
        for (k, &g) in dlogits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &p[l.dw + k * l.dense_in..][..l.dense_in];
            for (d, wv) in dp2.iter_mut().zip(row) {
                *d += g * wv;
            }
            if let Some(dp) = dparams.as_deref_mut() {
                dp[l.db + k] += g;
                for (d, a) in dp[l.dw + k * l.dense_in..][..l.dense_in].iter_mut().zip(&cache.p2) {
                    *d += g * a;
                }
            }
        }
        let mut da2 = avgpool2_backward(&dp2, l.h2, l.w2, CONV2_FILTERS);
        for (d, a) in da2.iter_mut().zip(&cache.a2) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        let dp1 = match dparams.as_deref_mut() {
            Some(dp) => {
                let (head, tail) = dp.split_at_mut(l.c2b);
                conv3x3_backward(&cache.p1, l.h2, l.w2, CONV1_FILTERS, &p[l.c2w..l.c2b], CONV2_FILTERS, &da2, Some((&mut head[l.c2w..], &mut tail[..CONV2_FILTERS])))
            }
            None => conv3x3_backward(&cache.p1, l.h2, l.w2, CONV1_FILTERS, &p[l.c2w..l.c2b], CONV2_FILTERS, &da2, None),
        };
        let mut da1 = avgpool2_backward(&dp1, h, w, CONV1_FILTERS);
        for (d, a) in da1.iter_mut().zip(&cache.a1) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        match dparams {
            Some(dp) => {
                let (head, tail) = dp.split_at_mut(l.c1b);
                conv3x3_backward(img.data(), h, w, c, &p[l.c1w..l.c1b], CONV1_FILTERS, &da1, Some((&mut head[l.c1w..], &mut tail[..CONV1_FILTERS])))
            }
            None => conv3x3_backward(img.data(), h, w, c, &p[l.c1w..l.c1b], CONV1_FILTERS, &da1, None),
        }
    }

    pub fn forward(&self, img: &Image) -> Result<Prediction> {
        let logits = self.run(img)?.logits;
        let probabilities = softmax(&logits);
        let label = argmax(&logits);
        Ok(Prediction { logits, probabilities, label })
    }

    pub fn predict(&self, img: &Image) -> Result<usize> {
        self.forward(img).map(|p| p.label)
    }

    pub fn loss(&self, img: &Image, loss: LossKind, y: usize) -> Result<f64> {
        let logits = self.run(img)?.logits;
        loss_and_logit_grad(&logits, loss, y).map(|(v, _)| v)
    }

    /// Loss, logits, and `∂loss/∂img`.
    pub fn loss_and_input_grad(&self, img: &Image, loss: LossKind, y: usize) -> Result<(f64, Vec<f64>, DiffImage)> {
        let cache = self.run(img)?;
        let (value, dlogits) = loss_and_logit_grad(&cache.logits, loss, y)?;
        let grad = self.backward(img, &cache, &dlogits, None);
        Ok((value, cache.logits, DiffImage::new(self.input, grad)?))
    }

    /// Gradient of `Σ_k w_k · z_k` with respect to the input, for an arbitrary
    /// upstream logit gradient.
    pub fn logit_vjp(&self, img: &Image, dlogits: &[f64]) -> Result<DiffImage> {
        let cache = self.run(img)?;
        DiffImage::new(self.input, self.backward(img, &cache, dlogits, None))
    }

    pub fn input_gradient(&self, img: &Image, loss: LossKind, y: usize) -> Result<DiffImage> {
        self.loss_and_input_grad(img, loss, y).map(|(_, _, g)| g)
    }

    fn loss_and_param_grad(&self, img: &Image, y: usize, dparams: &mut [f64]) -> Result<f64> {
        let cache = self.run(img)?;
        let (value, dlogits) = loss_and_logit_grad(&cache.logits, LossKind::CrossEntropy, y)?;
        self.backward(img, &cache, &dlogits, Some(dparams));
        Ok(value)
    }

    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64> {
        if dataset.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for (img, y) in dataset.samples() {
            correct += usize::from(self.predict(img)? == *y);
        }
        Ok(correct as f64 / dataset.len() as f64)
    }

    pub fn mean_loss(&self, dataset: &Dataset) -> Result<f64> {
        let mut total = 0.0;
        for (img, y) in dataset.samples() {
            total += self.loss(img, LossKind::CrossEntropy, *y)?;
        }
        Ok(total / dataset.len().max(1) as f64)
    }

    /// Flat little-endian encoding: magic, version, input shape, class count,
    /// tensor shape table, then every parameter as an `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let layout = self.layout();
        let mut out = Vec::with_capacity(64 + self.params.len() * 8);
        out.extend_from_slice(MODEL_MAGIC);
        let header = [
            MODEL_VERSION,
            self.input.height as u32,
            self.input.width as u32,
            self.input.channels as u32,
            self.class_count as u32,
        ];
        for v in header {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let shapes = layout.tensor_shapes(self.input, self.class_count);
        out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
        for dims in &shapes {
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or(Error::Truncated { expected: pos + n, found: bytes.len() })?;
            pos += n;
            Ok(s)
        };
        if take(8)? != MODEL_MAGIC {
            return Err(Error::Malformed("not a model file".into()));
        }
        let mut word = || -> Result<u32> { Ok(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"))) };
        let version = word()?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedFormat(format!("model version {version}")));
        }
        let (h, w, c, k) = (word()? as usize, word()? as usize, word()? as usize, word()? as usize);
        let input = Shape::new(h, w, c);
        let expected_shapes = Layout::new(input, k).tensor_shapes(input, k);
        let count = word()? as usize;
        let mut shapes = Vec::with_capacity(count.min(16));
        for _ in 0..count {
            let rank = word()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(word()?);
            }
            shapes.push(dims);
        }
        if shapes != expected_shapes {
            return Err(Error::Malformed(format!("tensor table {shapes:?} does not match architecture {expected_shapes:?}")));
        }
        let mut model = Model::init(0, input, k)?;
        for p in model.params.iter_mut() {
            *p = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        }
        if pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialTraining {
    /// l2 budget of the training-time PGD examples.
    pub epsilon: f64,
    pub pgd_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub adversarial: Option<AdversarialTraining>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 8, batch_size: 16, learning_rate: 3e-3, seed: 0, adversarial: None }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
        }
        if let Some(adv) = self.adversarial {
            if !(adv.epsilon > 0.0) || adv.pgd_steps == 0 {
                return Err(Error::InvalidArgument("adversarial training needs epsilon > 0 and steps >= 1".into()));
            }
        }
        Ok(())
    }
}

/// l2 PGD directly on the model input: normalized-gradient ascent on the
/// cross-entropy, projected onto the ε-ball and the unit box.
pub fn pgd_l2_input(model: &Model, x: &Image, y: usize, epsilon: f64, steps: usize, step_size: f64) -> Result<Image> {
    let mut adv = x.clone();
    for _ in 0..steps {
        let g = model.input_gradient(&adv, LossKind::CrossEntropy, y)?;
        let Some(dir) = g.normalized() else { break };
        adv = adv.add_scaled(&dir, step_size)?;
        let mut delta = adv.diff(x)?;
        let n = crate::image::l2_norm(&delta);
        if n > epsilon {
            delta = delta.scale(epsilon / n);
        }
        adv = x.add(&delta)?.clamp01();
    }
    Ok(adv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each epoch (on the batches actually used).
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch Adam on the cross-entropy. With `config.adversarial` set, every
/// batch is replaced by its PGD-l2 counterpart before the update.
pub fn train_logged(model: &Model, dataset: &Dataset, config: &TrainConfig) -> Result<(Model, TrainReport)> {
    config.validate()?;
    if let Some(shape) = dataset.shape() {
        model.input.ensure_eq(shape)?;
    }
    let mut model = model.clone();
    let mut report = TrainReport { epoch_losses: Vec::with_capacity(config.epochs) };
    if config.epochs == 0 || dataset.is_empty() {
        return Ok((model, report));
    }
    let mut rng = RngState::new(config.seed);
    let n = model.params.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut t = 0i32;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut grad = vec![0.0; n];
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let (img, y) = &dataset.samples()[i];
                let sample = match config.adversarial {
                    Some(adv) => {
                        let step = 2.5 * adv.epsilon / adv.pgd_steps as f64;
                        pgd_l2_input(&model, img, *y, adv.epsilon, adv.pgd_steps, step)?
                    }
                    None => img.clone(),
                };
                epoch_loss += model.loss_and_param_grad(&sample, *y, &mut grad)?;
            }
            t += 1;
            let scale = 1.0 / batch.len() as f64;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            for k in 0..n {
                let g = grad[k] * scale;
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                model.params[k] -= config.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
        report.epoch_losses.push(epoch_loss / dataset.len() as f64);
    }
    Ok((model, report))
}

pub fn train(model: &Model, dataset: &Dataset, config: &TrainConfig) -> Result<Model> {
    let plain = TrainConfig { adversarial: None, ..*config };
    train_logged(model, dataset, &plain).map(|(m, _)| m)
}

/// Adversarial training; `config.adversarial` must be set.
pub fn adv_train(model: &Model, dataset: &Dataset, config: &TrainConfig) -> Result<Model> {
    if config.adversarial.is_none() {
        return Err(Error::InvalidArgument("adv_train needs an adversarial training config".into()));
    }
    train_logged(model, dataset, config).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_dataset;

    fn random_image(rng: &mut RngState, shape: Shape) -> Image {
        Image::from_fn(shape, |_, _, _| rng.uniform())
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let shape = Shape::new(12, 12, 1);
        assert_eq!(Model::init(3, shape, 4).unwrap(), Model::init(3, shape, 4).unwrap());
        assert_ne!(Model::init(3, shape, 4).unwrap(), Model::init(4, shape, 4).unwrap());
        assert!(Model::init(3, shape, 0).is_err());
        assert!(Model::init(3, Shape::new(3, 12, 1), 2).is_err());
    }

    #[test]
    fn zero_image_gives_near_uniform_probabilities() {
        let model = Model::init(1, Shape::new(16, 16, 3), 5).unwrap();
        let pred = model.forward(&Image::zeros(Shape::new(16, 16, 3))).unwrap();
        assert!(pred.probabilities.iter().all(|p| (p - 0.2).abs() <= 0.2));
        let g = model.input_gradient(&Image::zeros(Shape::new(16, 16, 3)), LossKind::CrossEntropy, 0).unwrap();
        assert!(g.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn probabilities_sum_to_one_and_shift_invariance() {
        let mut rng = RngState::new(2);
        let model = Model::init(2, Shape::new(12, 12, 1), 3).unwrap();
        let pred = model.forward(&random_image(&mut rng, Shape::new(12, 12, 1))).unwrap();
        assert!((pred.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let shifted: Vec<f64> = pred.logits.iter().map(|z| z + 17.0).collect();
        assert_eq!(argmax(&shifted), pred.label);
        let ps = softmax(&shifted);
        for (a, b) in ps.iter().zip(&pred.probabilities) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(model.forward(&Image::zeros(Shape::new(11, 12, 1))).is_err());
    }

    #[test]
    fn loss_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
        // runner-up beats z_y by exactly kappa → 0
        assert_eq!(cw_margin(&[1.0, 3.0, 0.0], 0, 2.0).unwrap(), 0.0);
        assert_eq!(cw_margin(&[1.0, 2.5, 0.0], 0, 2.0).unwrap(), 0.5);
        // misclassified with kappa 0 → 0
        assert_eq!(cw_margin(&[0.1, 0.9], 0, 0.0).unwrap(), 0.0);
        assert!(cw_margin(&[0.1, 0.9], 5, 0.0).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = RngState::new(4);
        let shape = Shape::new(12, 12, 2);
        let model = Model::init(5, shape, 4).unwrap();
        for loss in [LossKind::CrossEntropy, LossKind::CwMargin { kappa: 5.0 }] {
            let img = random_image(&mut rng, shape);
            let g = model.input_gradient(&img, loss, 1).unwrap();
            let h = 1e-5;
            for _ in 0..100 {
                let i = rng.below(shape.len());
                let mut p = img.clone();
                let mut m = img.clone();
                p.data_mut()[i] += h;
                m.data_mut()[i] -= h;
                let fd = (model.loss(&p, loss, 1).unwrap() - model.loss(&m, loss, 1).unwrap()) / (2.0 * h);
                let err = (fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs()).max(1e-6);
                assert!(err <= 1e-4, "{loss:?} coord {i}: fd {fd} vs {}", g.data()[i]);
            }
        }
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let mut rng = RngState::new(6);
        let shape = Shape::new(8, 8, 1);
        let model = Model::init(7, shape, 3).unwrap();
        let img = random_image(&mut rng, shape);
        let mut grad = vec![0.0; model.param_count()];
        model.loss_and_param_grad(&img, 2, &mut grad).unwrap();
        let h = 1e-6;
        for _ in 0..60 {
            let k = rng.below(model.param_count());
            let mut p = model.clone();
            let mut m = model.clone();
            p.params[k] += h;
            m.params[k] -= h;
            let fd = (p.loss(&img, LossKind::CrossEntropy, 2).unwrap() - m.loss(&img, LossKind::CrossEntropy, 2).unwrap()) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-5 * fd.abs().max(1e-3), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn training_reduces_loss_and_zero_epochs_is_identity() {
        let data = synth_dataset(&mut RngState::new(1), 60, 16, 3).unwrap();
        let model = Model::init(1, Shape::new(16, 16, 1), 3).unwrap();
        let before = model.mean_loss(&data).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 8, learning_rate: 3e-3, seed: 1, adversarial: None };
        let (trained, report) = train_logged(&model, &data, &cfg).unwrap();
        assert_eq!(report.epoch_losses.len(), 1);
        assert!(trained.mean_loss(&data).unwrap() < before);
        let same = train(&model, &data, &TrainConfig { epochs: 0, ..cfg }).unwrap();
        assert_eq!(same, model);
        assert!(adv_train(&model, &data, &cfg).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data = synth_dataset(&mut RngState::new(2), 24, 12, 2).unwrap();
        let model = Model::init(2, Shape::new(12, 12, 1), 2).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 5, learning_rate: 1e-2, seed: 9, adversarial: None };
        assert_eq!(train(&model, &data, &cfg).unwrap(), train(&model, &data, &cfg).unwrap());
    }

    #[test]
    fn model_bytes_round_trip_exactly() {
        let model = Model::init(11, Shape::new(12, 16, 3), 7).unwrap();
        let bytes = model.to_bytes();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Model::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Model::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Model::from_bytes(&extra).is_err());
    }
}

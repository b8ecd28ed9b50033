//! Joint white-box attacks against `model ∘ scale ∘ defense`.
//!
//! The pipeline is differentiated end to end: the model supplies the LR input
//! gradient, the scaler its adjoint, and the defense either routes gradient
//! to window medians, averages over randomized draws (EOT), or backpropagates
//! through the cached-noise model `μ(x) + η`.

use crate::attack::AttackResult;
use crate::classifier::{argmax, loss_and_logit_grad, LossKind, Model, Prediction};
use crate::defenses::detection::{detect_score, detect_score_grad, DetectionSpec};
use crate::defenses::prevention::{apply_prevention_traced, CachedSampler, PreventionKind, PreventionSpec, DEFAULT_EOT_SAMPLES};
use crate::error::{Error, Result};
use crate::image::{l2_norm, DiffImage, Image, Shape};
use crate::rng::RngState;
use crate::scaling::{adjoint_scale, scale, ScalerSpec};

/// Iterations between cached-noise refreshes.
pub const DEFAULT_CACHE_INTERVAL: usize = 20;
/// The detection hinge switches on at this fraction of the threshold.
pub const HINGE_FRACTION: f64 = 0.9;
/// Repeats and agreement fraction of the randomized-defense voting rule.
pub const VOTE_REPEATS: usize = 100;
pub const VOTE_FRACTION: f64 = 0.9;

pub const CW_INITIAL_C: f64 = 1e-2;
pub const CW_C_RANGE: (f64, f64) = (1e-5, 1e4);

#[derive(Debug, Clone, PartialEq)]
pub enum Defense {
    None,
    Prevention(PreventionSpec),
}

/// How gradients pass a randomized defense.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomizedGradient {
    /// Fresh Monte-Carlo draws for every gradient.
    Eot { samples: usize },
    /// Noise bank reused for `interval` gradients around a moving iterate.
    Cached { samples: usize, interval: usize },
}

impl Default for RandomizedGradient {
    fn default() -> Self {
        RandomizedGradient::Cached { samples: DEFAULT_EOT_SAMPLES, interval: DEFAULT_CACHE_INTERVAL }
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    defense: Defense,
    scaler: ScalerSpec,
    model: Model,
}

impl Pipeline {
    pub fn new(defense: Defense, scaler: ScalerSpec, model: Model) -> Result<Self> {
        let input = model.input_shape();
        scaler.out_shape(input.channels).ensure_eq(input)?;
        if let Defense::Prevention(spec) = &defense {
            spec.mask().check_hw(scaler.in_shape(input.channels))?;
        }
        Ok(Self { defense, scaler, model })
    }

    /// Undefended identity-scaler pipeline: the bare model in LR space.
    pub fn lr(model: Model) -> Result<Self> {
        let s = model.input_shape();
        let scaler = ScalerSpec::identity(crate::scaling::ScalerKind::Nearest, (s.height, s.width))?;
        Self::new(Defense::None, scaler, model)
    }

    pub fn defense(&self) -> &Defense {
        &self.defense
    }

    pub fn scaler(&self) -> &ScalerSpec {
        &self.scaler
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn hr_shape(&self) -> Shape {
        self.scaler.in_shape(self.model.input_shape().channels)
    }

    pub fn is_randomized(&self) -> bool {
        matches!(&self.defense, Defense::Prevention(s) if s.kind() == PreventionKind::Randomized)
    }

    fn prevention(&self) -> Option<&PreventionSpec> {
        match &self.defense {
            Defense::None => None,
            Defense::Prevention(s) => Some(s),
        }
    }

    fn defend(&self, x: &Image, rng: &mut RngState) -> Result<Image> {
        match self.prevention() {
            None => Ok(x.clone()),
            Some(spec) => apply_prevention_traced(spec, x, rng).map(|(out, _)| out),
        }
    }
}

pub fn pipeline_forward(pipe: &Pipeline, hr: &Image, rng: &mut RngState) -> Result<(Image, Prediction)> {
    pipe.hr_shape().ensure_eq(hr.shape())?;
    let lr = scale(&pipe.scaler, &pipe.defend(hr, rng)?)?;
    let pred = pipe.model.forward(&lr)?;
    Ok((lr, pred))
}

/// Majority label over `repeats` pipeline runs and the fraction of runs that
/// returned `y`.
pub fn predict_vote(pipe: &Pipeline, hr: &Image, y: usize, repeats: usize, rng: &mut RngState) -> Result<(usize, f64)> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    let mut counts = vec![0usize; pipe.model.class_count()];
    for _ in 0..repeats {
        counts[pipeline_forward(pipe, hr, rng)?.1.label] += 1;
    }
    let majority = counts.iter().enumerate().max_by_key(|&(i, c)| (*c, std::cmp::Reverse(i))).map(|(i, _)| i).unwrap_or(0);
    Ok((majority, counts.get(y).copied().unwrap_or(0) as f64 / repeats as f64))
}

/// Whether the pipeline counts `hr` as correctly classified: a single run for
/// deterministic pipelines, the voting rule for randomized filtering.
pub fn classified_correctly(pipe: &Pipeline, hr: &Image, y: usize, rng: &mut RngState) -> Result<bool> {
    if pipe.is_randomized() {
        let (_, fraction) = predict_vote(pipe, hr, y, VOTE_REPEATS, rng)?;
        Ok(fraction >= VOTE_FRACTION)
    } else {
        Ok(pipeline_forward(pipe, hr, rng)?.1.label == y)
    }
}

/// Loss, mean logits and input gradient of one pipeline evaluation.
#[derive(Debug, Clone)]
pub struct GradEval {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grad: DiffImage,
}

/// Stateful gradient oracle for the pipeline (owns the cached noise bank).
#[derive(Debug, Clone)]
pub struct PipelineGradient<'a> {
    pipe: &'a Pipeline,
    randomized: RandomizedGradient,
    sampler: Option<CachedSampler>,
    fresh_calls: usize,
    evaluations: usize,
}

impl<'a> PipelineGradient<'a> {
    pub fn new(pipe: &'a Pipeline, randomized: RandomizedGradient) -> Result<Self> {
        let (RandomizedGradient::Eot { samples } | RandomizedGradient::Cached { samples, .. }) = randomized;
        if samples == 0 {
            return Err(Error::InvalidArgument("randomized gradients need at least one sample".into()));
        }
        if let RandomizedGradient::Cached { interval: 0, .. } = randomized {
            return Err(Error::InvalidArgument("cache interval must be >= 1".into()));
        }
        Ok(Self { pipe, randomized, sampler: None, fresh_calls: 0, evaluations: 0 })
    }

    /// Randomized-filter draws spent on gradients so far.
    pub fn sampling_calls(&self) -> usize {
        self.fresh_calls + self.sampler.as_ref().map_or(0, |s| s.sampling_calls())
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn eval(&mut self, x: &Image, y: usize, loss: LossKind, rng: &mut RngState) -> Result<GradEval> {
        self.pipe.hr_shape().ensure_eq(x.shape())?;
        self.evaluations += 1;
        let pipe = self.pipe;
        let spec = match pipe.prevention() {
            None => {
                let (loss, logits, grad) = through_model(pipe, x, loss, y)?;
                return Ok(GradEval { loss, logits, grad });
            }
            Some(spec) => spec,
        };
        if spec.kind() == PreventionKind::Median {
            let (defended, routing) = apply_prevention_traced(spec, x, rng)?;
            let (loss, logits, g) = through_model(pipe, &defended, loss, y)?;
            return Ok(GradEval { loss, logits, grad: routing.backprop(&g) });
        }
        let mut acc = Accumulator::new(x.shape(), pipe.model.class_count());
        match self.randomized {
            RandomizedGradient::Eot { samples } => {
                for _ in 0..samples {
                    let (defended, routing) = apply_prevention_traced(spec, x, rng)?;
                    self.fresh_calls += 1;
                    let (l, z, g) = through_model(pipe, &defended, loss, y)?;
                    acc.add(l, &z, &routing.backprop(&g));
                }
                Ok(acc.finish())
            }
            RandomizedGradient::Cached { samples, interval } => {
                let sampler = match &mut self.sampler {
                    Some(s) => s,
                    slot => slot.insert(CachedSampler::new(spec.clone(), x, samples, interval, rng)?),
                };
                sampler.tick(x, rng)?;
                for out in sampler.outputs(x)? {
                    let (l, z, g) = through_model(pipe, &out, loss, y)?;
                    acc.add(l, &z, &g);
                }
                let mut eval = acc.finish();
                eval.grad = sampler.backprop(&eval.grad)?;
                Ok(eval)
            }
        }
    }
}

/// Model loss at one defended HR image, with the gradient pulled back to HR.
fn through_model(pipe: &Pipeline, defended: &Image, loss: LossKind, y: usize) -> Result<(f64, Vec<f64>, DiffImage)> {
    let lr = scale(&pipe.scaler, defended)?;
    let (value, logits, g) = pipe.model.loss_and_input_grad(&lr, loss, y)?;
    Ok((value, logits, adjoint_scale(&pipe.scaler, &g)?))
}

struct Accumulator {
    n: usize,
    loss: f64,
    logits: Vec<f64>,
    grad: DiffImage,
}

impl Accumulator {
    fn new(shape: Shape, classes: usize) -> Self {
        Self { n: 0, loss: 0.0, logits: vec![0.0; classes], grad: DiffImage::zeros(shape) }
    }

    fn add(&mut self, loss: f64, logits: &[f64], grad: &DiffImage) {
        self.n += 1;
        self.loss += loss;
        for (a, z) in self.logits.iter_mut().zip(logits) {
            *a += z;
        }
        self.grad.add_assign_scaled(grad, 1.0);
    }

    fn finish(self) -> GradEval {
        let inv = 1.0 / self.n as f64;
        GradEval { loss: self.loss * inv, logits: self.logits.iter().map(|z| z * inv).collect(), grad: self.grad.scale(inv) }
    }
}

/// `∂J((model∘scale∘defense)(x), y)/∂x`; randomized defenses use a fresh
/// EOT estimate with the default sample count.
pub fn pipeline_input_grad(pipe: &Pipeline, hr: &Image, y: usize, loss: LossKind, rng: &mut RngState) -> Result<DiffImage> {
    let mut oracle = PipelineGradient::new(pipe, RandomizedGradient::Eot { samples: DEFAULT_EOT_SAMPLES })?;
    oracle.eval(hr, y, loss, rng).map(|e| e.grad)
}

/// Detection-evasion term added to an attack objective.
#[derive(Debug, Clone)]
pub struct Regularizer {
    pub gamma: f64,
    pub detector: DetectionSpec,
}

fn hinge(detector: &DetectionSpec, img: &Image) -> Result<f64> {
    Ok((detect_score(detector, img)? - HINGE_FRACTION * detector.threshold()).max(0.0))
}

/// `base − γ·max(score − 0.9·threshold, 0)`.
pub fn regularized_objective(base: f64, detector: &DetectionSpec, gamma: f64, hr: &Image) -> Result<f64> {
    if gamma == 0.0 {
        return Ok(base);
    }
    Ok(base - gamma * hinge(detector, hr)?)
}

impl Regularizer {
    fn new_checked(&self) -> Result<()> {
        if !self.detector.is_differentiable() {
            return Err(Error::InvalidArgument(format!("{} detector has no gradient", self.detector.kind())));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidArgument("gamma must be >= 0".into()));
        }
        Ok(())
    }

    /// Adds `−γ·∇hinge` to an ascent direction.
    fn apply(&self, img: &Image, grad: &mut DiffImage) -> Result<()> {
        if self.gamma > 0.0 && hinge(&self.detector, img)? > 0.0 {
            grad.add_assign_scaled(&detect_score_grad(&self.detector, img)?, -self.gamma);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PgdConfig {
    /// ℓ₂ budget on the HR perturbation.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    pub randomized: RandomizedGradient,
    pub regularizer: Option<Regularizer>,
    /// Stop as soon as a deterministic pipeline misclassifies.
    pub early_stop: bool,
}

impl PgdConfig {
    /// Schedule of 100 steps of size `0.1·ε`.
    pub fn new(epsilon: f64, seed: u64) -> Self {
        Self {
            epsilon,
            steps: 100,
            step_size: 0.1 * epsilon,
            seed,
            randomized: RandomizedGradient::default(),
            regularizer: None,
            early_stop: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.step_size > 0.0) || self.steps == 0 {
            return Err(Error::InvalidArgument("PGD needs epsilon > 0, step size > 0 and steps >= 1".into()));
        }
        if let Some(r) = &self.regularizer {
            r.new_checked()?;
        }
        Ok(())
    }
}

/// Per-iteration record of a PGD run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PgdTrace {
    /// Estimated attack loss before each step.
    pub losses: Vec<f64>,
    pub sampling_calls: usize,
}

pub fn pgd_joint(pipe: &Pipeline, source: &Image, y: usize, cfg: &PgdConfig) -> Result<AttackResult> {
    pgd_joint_traced(pipe, source, y, cfg).map(|(r, _)| r)
}

pub fn pgd_joint_traced(pipe: &Pipeline, source: &Image, y: usize, cfg: &PgdConfig) -> Result<(AttackResult, PgdTrace)> {
    cfg.validate()?;
    pipe.hr_shape().ensure_eq(source.shape())?;
    let beta = pipe.scaler.beta();
    let mut rng = RngState::new(cfg.seed);
    let mut trace = PgdTrace::default();
    if !classified_correctly(pipe, source, y, &mut rng.split(1))? {
        let mut r = AttackResult::measure(source, source.clone(), beta)?;
        r.success = true;
        return Ok((r, trace));
    }
    let mut oracle = PipelineGradient::new(pipe, cfg.randomized)?;
    let deterministic = !pipe.is_randomized();
    let mut x = source.clone();
    let mut iterations = 0;
    for _ in 0..cfg.steps {
        let eval = oracle.eval(&x, y, LossKind::CrossEntropy, &mut rng)?;
        trace.losses.push(eval.loss);
        if cfg.early_stop && deterministic && argmax(&eval.logits) != y {
            break;
        }
        let mut g = eval.grad;
        if let Some(reg) = &cfg.regularizer {
            reg.apply(&x, &mut g)?;
        }
        let Some(dir) = g.normalized() else { break };
        let mut delta = x.diff(source)?;
        delta.add_assign_scaled(&dir, cfg.step_size);
        let n = l2_norm(&delta);
        if n > cfg.epsilon {
            delta = delta.scale(cfg.epsilon / n);
        }
        x = source.add(&delta)?.clamp01();
        iterations += 1;
        debug_assert!(l2_norm(&x.diff(source)?) <= cfg.epsilon * (1.0 + 1e-12));
    }
    trace.sampling_calls = oracle.sampling_calls();
    let mut r = AttackResult::measure(source, x, beta)?;
    r.success = !classified_correctly(pipe, &r.image, y, &mut rng.split(2))?;
    r.label = Some(pipeline_forward(pipe, &r.image, &mut rng.split(3))?.1.label);
    r.queries = oracle.evaluations();
    r.iterations = iterations;
    Ok((r, trace))
}

#[derive(Debug, Clone)]
pub struct CwConfig {
    pub kappa: f64,
    pub binary_search_steps: usize,
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub randomized: RandomizedGradient,
}

impl CwConfig {
    pub fn new(kappa: f64, seed: u64) -> Self {
        Self {
            kappa,
            binary_search_steps: 20,
            max_iterations: 100,
            learning_rate: 1e-2,
            seed,
            randomized: RandomizedGradient::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0) || self.binary_search_steps == 0 || self.max_iterations == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("C&W needs kappa >= 0, positive steps and learning rate".into()));
        }
        Ok(())
    }
}

/// Margin condition of the C&W objective: runner-up logit ahead by `κ`.
fn margin_met(logits: &[f64], y: usize, kappa: f64) -> bool {
    let other = logits.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, z)| *z).fold(f64::NEG_INFINITY, f64::max);
    other - logits[y] >= kappa
}

fn adam_step(x: &Image, g: &DiffImage, m: &mut [f64], v: &mut [f64], t: i32, lr: f64) -> Image {
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let mut out = x.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let gi = g.data()[i];
        m[i] = b1 * m[i] + (1.0 - b1) * gi;
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
        *o -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
    }
    out.clamp01_in_place();
    out
}

/// `min ‖Δ‖₂ + c·f(S + Δ)` with a binary search over `c`; returns the
/// smallest successful perturbation, or `success = false` if none was found.
pub fn cw_joint(pipe: &Pipeline, source: &Image, y: usize, cfg: &CwConfig) -> Result<AttackResult> {
    cfg.validate()?;
    pipe.hr_shape().ensure_eq(source.shape())?;
    let beta = pipe.scaler.beta();
    let mut rng = RngState::new(cfg.seed);
    let loss = LossKind::CwMargin { kappa: cfg.kappa };
    let mut oracle = PipelineGradient::new(pipe, cfg.randomized)?;

    let start = oracle.eval(source, y, loss, &mut rng)?;
    if margin_met(&start.logits, y, cfg.kappa) {
        let mut r = AttackResult::measure(source, source.clone(), beta)?;
        r.success = true;
        r.label = Some(argmax(&start.logits));
        r.queries = oracle.evaluations();
        return Ok(r);
    }

    let (mut lower, mut upper) = (None::<f64>, None::<f64>);
    let mut c = CW_INITIAL_C;
    let mut best: Option<(f64, Image, usize)> = None;
    let mut iterations = 0;
    for _ in 0..cfg.binary_search_steps {
        let mut x = source.clone();
        let n = x.data().len();
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        let mut found = false;
        let mut previous = f64::INFINITY;
        let check_every = (cfg.max_iterations / 10).max(1);
        for it in 0..cfg.max_iterations {
            let eval = oracle.eval(&x, y, loss, &mut rng)?;
            let delta = x.diff(source)?;
            let norm = l2_norm(&delta);
            if margin_met(&eval.logits, y, cfg.kappa) {
                found = true;
                if best.as_ref().is_none_or(|(b, _, _)| norm < *b) {
                    best = Some((norm, x.clone(), argmax(&eval.logits)));
                }
            }
            let objective = norm + c * eval.loss;
            if it % check_every == 0 {
                if objective > 0.9999 * previous {
                    break;
                }
                previous = objective;
            }
            let mut g = eval.grad.scale(c);
            if norm > 0.0 {
                g.add_assign_scaled(&delta, 1.0 / norm);
            }
            x = adam_step(&x, &g, &mut m, &mut v, it as i32 + 1, cfg.learning_rate);
            iterations += 1;
        }
        if found {
            upper = Some(upper.map_or(c, |u: f64| u.min(c)));
            c = match lower {
                Some(l) => 0.5 * (l + c),
                None => 0.5 * c,
            };
        } else {
            lower = Some(lower.map_or(c, |l: f64| l.max(c)));
            c = match upper {
                Some(u) => 0.5 * (c + u),
                None => 2.0 * c,
            };
        }
        c = c.clamp(CW_C_RANGE.0, CW_C_RANGE.1);
    }

    let (image, label, success) = match best {
        Some((_, img, label)) => (img, Some(label), true),
        None => (source.clone(), None, false),
    };
    let mut r = AttackResult::measure(source, image, beta)?;
    r.success = success;
    r.label = label;
    r.queries = oracle.evaluations();
    r.iterations = iterations;
    Ok(r)
}

/// Loss value for the regularized objective at `x` (for monitoring).
pub fn attack_loss(pipe: &Pipeline, x: &Image, y: usize, loss: LossKind, rng: &mut RngState, samples: usize) -> Result<f64> {
    let mut oracle = PipelineGradient::new(pipe, RandomizedGradient::Eot { samples })?;
    oracle.eval(x, y, loss, rng).map(|e| e.loss)
}

/// Cross-entropy of the bare model on an LR image (used by the tests as an
/// independent reference).
pub fn lr_loss(model: &Model, lr: &Image, y: usize) -> Result<f64> {
    let logits = model.forward(lr)?.logits;
    loss_and_logit_grad(&logits, LossKind::CrossEntropy, y).map(|(v, _)| v)
}

//! Decision-based joint attack: a HopSkipJump-style boundary walk whose
//! gradient-estimation noise can be confined to the scaler's LR subspace.
//!
//! Each iteration bisects to the decision boundary, estimates the boundary
//! normal from the signs of `B` noisy queries, and takes a geometric step
//! along it before bisecting back toward the source.

use std::fmt;
use std::str::FromStr;

use crate::attack::AttackResult;
use crate::attack_whitebox::{pipeline_forward, Pipeline};
use crate::defenses::prevention::PreventionSpec;
use crate::defenses::smooth_median::{SmoothDefenseJacobian, DEFAULT_QUANTILES};
use crate::error::{Error, Result};
use crate::image::{l2_norm, DiffImage, Image};
use crate::rng::RngState;
use crate::scaling::{adjoint_scale, identify_mask, ScalerSpec};

pub const DEFAULT_TOLERANCE: f64 = 1e-3;
pub const INITIAL_BATCH: usize = 100;
pub const MAX_INIT_QUERIES: usize = 200;
pub const MAX_STEP_HALVINGS: usize = 20;
pub const NOISE_RETRIES: usize = 10;

/// Hard-label oracle with an exact query counter and an optional budget.
pub struct BlackboxOracle<'a> {
    query: Box<dyn FnMut(&Image) -> Result<usize> + 'a>,
    label: usize,
    queries: usize,
    budget: Option<usize>,
}

impl fmt::Debug for BlackboxOracle<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlackboxOracle").field("label", &self.label).field("queries", &self.queries).field("budget", &self.budget).finish()
    }
}

impl<'a> BlackboxOracle<'a> {
    pub fn new(label: usize, query: impl FnMut(&Image) -> Result<usize> + 'a) -> Self {
        Self { query: Box::new(query), label, queries: 0, budget: None }
    }

    /// Oracle answering with the pipeline's label (one defense draw per query).
    pub fn for_pipeline(pipe: &'a Pipeline, label: usize, seed: u64) -> Self {
        let mut rng = RngState::new(seed);
        Self::new(label, move |x| pipeline_forward(pipe, x, &mut rng).map(|(_, p)| p.label))
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn remaining(&self) -> Option<usize> {
        self.budget.map(|b| b.saturating_sub(self.queries))
    }

    pub fn classify(&mut self, x: &Image) -> Result<usize> {
        if self.remaining() == Some(0) {
            return Err(Error::BudgetExhausted);
        }
        self.queries += 1;
        (self.query)(x)
    }

    pub fn is_adversarial(&mut self, x: &Image) -> Result<bool> {
        Ok(self.classify(x)? != self.label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplingMode {
    HrNaive,
    LrSubspace,
    LrSubspaceMedian,
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::HrNaive => "hr_naive",
            SamplingMode::LrSubspace => "lr_subspace",
            SamplingMode::LrSubspaceMedian => "lr_subspace_median",
        })
    }
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hr_naive" => Ok(SamplingMode::HrNaive),
            "lr_subspace" => Ok(SamplingMode::LrSubspace),
            "lr_subspace_median" => Ok(SamplingMode::LrSubspaceMedian),
            other => Err(Error::InvalidArgument(format!("unknown sampling mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsjConfig {
    pub budget: usize,
    /// Relative bisection tolerance.
    pub tolerance: f64,
    /// Batch size of the first gradient estimate; grows with √iteration.
    pub initial_batch: usize,
    pub seed: u64,
    pub mode: SamplingMode,
    /// Smooth-median quantile bounds for [`SamplingMode::LrSubspaceMedian`].
    pub quantiles: (f64, f64),
}

impl HsjConfig {
    pub fn new(budget: usize, mode: SamplingMode, seed: u64) -> Self {
        Self { budget, tolerance: DEFAULT_TOLERANCE, initial_batch: INITIAL_BATCH, seed, mode, quantiles: DEFAULT_QUANTILES }
    }

    fn validate(&self) -> Result<()> {
        if self.budget < 100 {
            return Err(Error::InvalidArgument(format!("query budget {} below 100", self.budget)));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 0.1) {
            return Err(Error::InvalidArgument(format!("tolerance {} outside (0, 0.1)", self.tolerance)));
        }
        if self.initial_batch == 0 {
            return Err(Error::InvalidArgument("initial batch must be positive".into()));
        }
        Ok(())
    }
}

/// Bisects the segment `benign → adversarial` until the bracket is at most
/// `tol` of its length; returns the adversarial end. Both endpoints must
/// already be known to the caller (no endpoint queries are spent).
pub fn boundary_search(oracle: &mut BlackboxOracle<'_>, benign: &Image, adversarial: &Image, tol: f64) -> Result<Image> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::Precondition(format!("tolerance {tol} outside (0, 1)")));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if oracle.is_adversarial(&benign.lerp(adversarial, mid))? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(benign.lerp(adversarial, hi))
}

/// Draws unit-norm search directions for one boundary point.
pub struct NoiseSampler<'a> {
    mode: SamplingMode,
    scaler: &'a ScalerSpec,
    jacobian: Option<SmoothDefenseJacobian>,
}

impl<'a> NoiseSampler<'a> {
    /// `defense` is the median defense known to the attacker; it is needed
    /// only by the median mode.
    pub fn new(mode: SamplingMode, scaler: &'a ScalerSpec, defense: Option<&PreventionSpec>, x: &Image, quantiles: (f64, f64)) -> Result<Self> {
        let jacobian = match (mode, defense) {
            (SamplingMode::LrSubspaceMedian, Some(spec)) => Some(SmoothDefenseJacobian::new(spec, x, quantiles.0, quantiles.1)?),
            (SamplingMode::LrSubspaceMedian, None) => {
                return Err(Error::InvalidArgument("median sampling mode needs the median defense".into()));
            }
            _ => None,
        };
        Ok(Self { mode, scaler, jacobian })
    }

    pub fn sample(&self, x: &Image, rng: &mut RngState) -> Result<DiffImage> {
        for _ in 0..=NOISE_RETRIES {
            let u = match self.mode {
                SamplingMode::HrNaive => DiffImage::new(x.shape(), rng.normal_vec(x.shape().len()))?,
                SamplingMode::LrSubspace | SamplingMode::LrSubspaceMedian => {
                    let lr = self.scaler.out_shape(x.channels());
                    let u_lr = DiffImage::new(lr, rng.normal_vec(lr.len()))?;
                    let back = adjoint_scale(self.scaler, &u_lr)?;
                    match &self.jacobian {
                        Some(j) => j.vjp(&back)?,
                        None => back,
                    }
                }
            };
            if let Some(unit) = u.normalized() {
                return Ok(unit);
            }
        }
        Err(Error::DegenerateNoise(NOISE_RETRIES))
    }
}

/// One LR-subspace noise draw `u*` at `x` (see [`NoiseSampler`]).
pub fn sample_subspace_noise(scaler: &ScalerSpec, median: Option<(&PreventionSpec, (f64, f64))>, x: &Image, rng: &mut RngState) -> Result<DiffImage> {
    let (mode, defense, q) = match median {
        Some((spec, q)) => (SamplingMode::LrSubspaceMedian, Some(spec), q),
        None => (SamplingMode::LrSubspace, None, DEFAULT_QUANTILES),
    };
    NoiseSampler::new(mode, scaler, defense, x, q)?.sample(x, rng)
}

/// Sign-average estimate of the boundary normal at `x`, using `batch`
/// queries at radius `delta` (plus one retry batch at an adjusted radius if
/// every answer agrees).
pub fn estimate_gradient(
    oracle: &mut BlackboxOracle<'_>,
    x: &Image,
    batch: usize,
    delta: f64,
    sampler: &NoiseSampler<'_>,
    rng: &mut RngState,
) -> Result<DiffImage> {
    let mut radius = delta;
    for attempt in 0..2 {
        let mut noise = Vec::with_capacity(batch);
        let mut signs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let u = sampler.sample(x, rng)?;
            let probe = x.add_scaled(&u, radius)?.clamp01();
            signs.push(if oracle.is_adversarial(&probe)? { 1.0 } else { -1.0 });
            noise.push(u);
        }
        let mean = signs.iter().sum::<f64>() / batch as f64;
        let uniform = mean.abs() == 1.0;
        if uniform && attempt == 0 {
            radius *= if mean > 0.0 { 2.0 } else { 0.5 };
            continue;
        }
        let mut dir = DiffImage::zeros(x.shape());
        for (u, s) in noise.iter().zip(&signs) {
            let w = if uniform { *s } else { s - mean };
            dir.add_assign_scaled(u, w / batch as f64);
        }
        return dir.normalized().ok_or(Error::DegenerateNoise(batch));
    }
    unreachable!("second attempt always returns")
}

/// Steps from the boundary point along `direction`, halving the step until
/// the candidate is adversarial, then bisects back toward `source`. Returns
/// `None` (state unchanged) if no halving produced an adversarial point.
pub fn geometric_step(
    oracle: &mut BlackboxOracle<'_>,
    boundary: &Image,
    direction: &DiffImage,
    source: &Image,
    iteration: usize,
    tol: f64,
) -> Result<Option<Image>> {
    let dist = l2_norm(&boundary.diff(source)?);
    let mut step = dist / (iteration.max(1) as f64).sqrt();
    for _ in 0..=MAX_STEP_HALVINGS {
        let candidate = boundary.add_scaled(direction, step)?.clamp01();
        if oracle.is_adversarial(&candidate)? {
            return boundary_search(oracle, source, &candidate, tol).map(Some);
        }
        step *= 0.5;
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlackboxOutcome {
    pub result: AttackResult,
    /// `(queries used, best scaled ℓ₂ so far)` after every accepted point.
    pub trajectory: Vec<(usize, f64)>,
}

impl BlackboxOutcome {
    /// Best scaled ℓ₂ reached within `queries` (infinite before the first
    /// adversarial point).
    pub fn best_at(&self, queries: usize) -> f64 {
        self.trajectory.iter().take_while(|(q, _)| *q <= queries).last().map_or(f64::INFINITY, |(_, d)| *d)
    }
}

struct Best {
    image: Image,
    scaled_l2: f64,
}

/// Runs the boundary walk against `oracle`. `scaler` and `defense` describe
/// the pipeline as known to the attacker; `starts` is a pool of candidate
/// images for the adversarial initialization.
pub fn attack(
    oracle: &mut BlackboxOracle<'_>,
    scaler: &ScalerSpec,
    defense: Option<&PreventionSpec>,
    source: &Image,
    starts: &[Image],
    cfg: &HsjConfig,
) -> Result<BlackboxOutcome> {
    cfg.validate()?;
    scaler.in_shape(source.channels()).ensure_eq(source.shape())?;
    let beta = scaler.beta();
    let start_queries = oracle.queries();
    let mut budgeted = BudgetGuard { oracle, limit: start_queries + cfg.budget };
    let mut rng = RngState::new(cfg.seed);

    if budgeted.run(|o| o.is_adversarial(source))? {
        return Err(Error::Precondition("source is already misclassified".into()));
    }
    let init = initialize(&mut budgeted, scaler, source, starts, cfg, &mut rng)?;
    let Some(mut current) = init else {
        return Err(Error::NoAdversarialInit(cfg.seed));
    };

    let record = |img: &Image| -> Result<f64> { Ok(l2_norm(&img.diff(source)?) / beta) };
    let mut best = Best { scaled_l2: record(&current)?, image: current.clone() };
    let mut trajectory = vec![(budgeted.used(start_queries), best.scaled_l2)];
    let dim = source.shape().len() as f64;
    let mut iterations = 0;

    for t in 1.. {
        let dist = l2_norm(&current.diff(source)?);
        if dist == 0.0 {
            break;
        }
        let remaining = budgeted.remaining();
        let batch = ((cfg.initial_batch as f64 * (t as f64).sqrt()) as usize).min(remaining);
        if batch == 0 {
            break;
        }
        let delta = dist / dim.sqrt();
        let sampler = NoiseSampler::new(cfg.mode, scaler, defense, &current, cfg.quantiles)?;
        let Some(dir) = budgeted.try_run(|o| estimate_gradient(o, &current, batch, delta, &sampler, &mut rng))? else {
            break;
        };
        let Some(step) = budgeted.try_run(|o| geometric_step(o, &current, &dir, source, t, cfg.tolerance))? else {
            break;
        };
        iterations += 1;
        if let Some(next) = step {
            current = next;
            let d = record(&current)?;
            if d < best.scaled_l2 {
                best = Best { scaled_l2: d, image: current.clone() };
            }
            trajectory.push((budgeted.used(start_queries), best.scaled_l2));
        }
    }

    let mut result = AttackResult::measure(source, best.image, beta)?;
    result.success = true;
    result.queries = budgeted.used(start_queries);
    result.iterations = iterations;
    Ok(BlackboxOutcome { result, trajectory })
}

/// Wraps the oracle so that running out of budget ends a phase cleanly.
struct BudgetGuard<'o, 'a> {
    oracle: &'o mut BlackboxOracle<'a>,
    limit: usize,
}

impl<'a> BudgetGuard<'_, 'a> {
    fn remaining(&self) -> usize {
        self.limit.saturating_sub(self.oracle.queries())
    }

    fn used(&self, start: usize) -> usize {
        self.oracle.queries() - start
    }

    fn scoped<T>(&mut self, f: impl FnOnce(&mut BlackboxOracle<'a>) -> Result<T>) -> Result<T> {
        let saved = self.oracle.budget;
        let cap = saved.map_or(self.limit, |b| b.min(self.limit));
        self.oracle.budget = Some(cap);
        let out = f(self.oracle);
        self.oracle.budget = saved;
        out
    }

    fn run<T>(&mut self, f: impl FnOnce(&mut BlackboxOracle<'a>) -> Result<T>) -> Result<T> {
        self.scoped(f)
    }

    /// Like [`run`](Self::run) but maps budget exhaustion to `None`.
    fn try_run<T>(&mut self, f: impl FnOnce(&mut BlackboxOracle<'a>) -> Result<T>) -> Result<Option<T>> {
        match self.scoped(f) {
            Ok(v) => Ok(Some(v)),
            Err(Error::BudgetExhausted) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

fn initialize(
    guard: &mut BudgetGuard<'_, '_>,
    scaler: &ScalerSpec,
    source: &Image,
    starts: &[Image],
    cfg: &HsjConfig,
    rng: &mut RngState,
) -> Result<Option<Image>> {
    // the undefended subspace mode only touches pixels the scaler reads; a
    // median window would simply vote such isolated changes away
    let mask = match cfg.mode {
        SamplingMode::LrSubspace => Some(identify_mask(scaler)),
        SamplingMode::HrNaive | SamplingMode::LrSubspaceMedian => None,
    };
    let blend = |other: &Image| -> Image {
        match &mask {
            None => other.clone(),
            Some(m) => {
                let ch = source.channels();
                let mut out = source.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    if m.bits()[i / ch] {
                        *v = other.data()[i];
                    }
                }
                out
            }
        }
    };
    let mut spent = 0;
    while spent < MAX_INIT_QUERIES {
        let candidate = if starts.is_empty() {
            Image::from_fn(source.shape(), |_, _, _| rng.uniform())
        } else {
            let pick = &starts[rng.below(starts.len())];
            pick.shape().ensure_eq(source.shape())?;
            pick.clone()
        };
        let candidate = blend(&candidate);
        spent += 1;
        match guard.try_run(|o| o.is_adversarial(&candidate))? {
            None => return Ok(None),
            Some(true) => return guard.try_run(|o| boundary_search(o, source, &candidate, cfg.tolerance)),
            Some(false) => {}
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;
    use crate::scaling::{build_matrices, pinv_tall, pinv_wide, scale_diff, ScalerKind};

    #[test]
    fn oracle_counts_every_query_and_respects_budget() {
        let mut o = BlackboxOracle::new(0, |x: &Image| Ok(usize::from(x.data()[0] > 0.5))).with_budget(3);
        let x = Image::zeros(Shape::new(2, 2, 1));
        for _ in 0..3 {
            assert!(!o.is_adversarial(&x).unwrap());
        }
        assert!(matches!(o.classify(&x), Err(Error::BudgetExhausted)));
        assert_eq!(o.queries(), 3);
    }

    #[test]
    fn bisection_cost_and_result() {
        let mut o = BlackboxOracle::new(0, |x: &Image| Ok(usize::from(x.data()[0] > 0.3)));
        let a = Image::zeros(Shape::new(1, 1, 1));
        let b = Image::filled(Shape::new(1, 1, 1), 1.0);
        let tol = 1e-3;
        let p = boundary_search(&mut o, &a, &b, tol).unwrap();
        assert!(p.data()[0] > 0.3 && p.data()[0] - 0.3 <= tol);
        assert!(o.queries() <= (1.0 / tol).log2().ceil() as usize);
    }

    #[test]
    fn identity_noise_is_the_normalized_lr_draw() {
        let scaler = ScalerSpec::identity(ScalerKind::Bilinear, (4, 4)).unwrap();
        let x = Image::zeros(Shape::new(4, 4, 1));
        let u = sample_subspace_noise(&scaler, None, &x, &mut RngState::new(3)).unwrap();
        let mut rng = RngState::new(3);
        let raw = DiffImage::new(x.shape(), rng.normal_vec(16)).unwrap();
        let expected = raw.normalized().unwrap();
        for (a, b) in u.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn subspace_noise_lies_in_the_row_space() {
        for kind in ScalerKind::ALL {
            let scaler = ScalerSpec::with_ratio(kind, (5, 6), 3).unwrap();
            let m = build_matrices(&scaler);
            let (lp, rp) = (pinv_wide(&m.l), pinv_tall(&m.r));
            let x = Image::zeros(scaler.in_shape(1));
            let mut rng = RngState::new(8);
            for _ in 0..20 {
                let u = sample_subspace_noise(&scaler, None, &x, &mut rng).unwrap();
                let (h, w) = scaler.in_hw();
                let um = nalgebra::DMatrix::from_row_slice(h, w, u.data());
                let proj = &lp * (&m.l * &um * &m.r) * &rp;
                let err = (proj - um).norm();
                assert!(err <= 1e-6, "{kind}: {err}");
                // ⟨scale(u*), u′⟩ > 0 follows from u* = Aᵀu′/‖Aᵀu′‖
                assert!(l2_norm(&scale_diff(&scaler, &u).unwrap()) > 0.0);
            }
        }
    }

    #[test]
    fn nearest_noise_is_supported_on_the_mask() {
        let scaler = ScalerSpec::with_ratio(ScalerKind::Nearest, (4, 4), 3).unwrap();
        let mask = identify_mask(&scaler);
        let x = Image::zeros(scaler.in_shape(1));
        let u = sample_subspace_noise(&scaler, None, &x, &mut RngState::new(1)).unwrap();
        for (i, v) in u.data().iter().enumerate() {
            assert_eq!(*v != 0.0, mask.bits()[i]);
        }
    }

    #[test]
    fn positive_correlation_with_the_lr_draw() {
        let scaler = ScalerSpec::with_ratio(ScalerKind::Bilinear, (4, 4), 4).unwrap();
        let x = Image::zeros(scaler.in_shape(1));
        let mut rng = RngState::new(2);
        for _ in 0..50 {
            let mut probe = rng.clone();
            let u = sample_subspace_noise(&scaler, None, &x, &mut rng).unwrap();
            let lr = scaler.out_shape(1);
            let u_lr = DiffImage::new(lr, probe.normal_vec(lr.len())).unwrap();
            assert!(scale_diff(&scaler, &u).unwrap().dot(&u_lr) > 0.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(HsjConfig::new(50, SamplingMode::HrNaive, 0).validate().is_err());
        let cfg = HsjConfig { tolerance: 0.2, ..HsjConfig::new(1000, SamplingMode::HrNaive, 0) };
        assert!(cfg.validate().is_err());
        assert_eq!("lr_subspace".parse::<SamplingMode>().unwrap(), SamplingMode::LrSubspace);
    }
}

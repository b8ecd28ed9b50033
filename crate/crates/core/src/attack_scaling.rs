//! Classic image-scaling attack: find `A = S + Δ` that stays close to the
//! source while `scale(A)` lands on a chosen target `T`.
//!
//! The hard constraint `‖scale(A) − T‖∞ ≤ ε` is replaced by the penalty
//! `‖Δ‖₂² + λ‖scale(A) − T‖₂²`, minimized by projected gradient descent with a
//! backtracking line search. If a stage converges without meeting `ε`, λ is
//! raised tenfold and descent continues from the current point.

use crate::attack::AttackResult;
use crate::classifier::Model;
use crate::error::{Error, Result};
use crate::image::{l2_norm, linf_norm, scaled_l2, DiffImage, Image};
use crate::scaling::{adjoint_scale, scale, ScalerSpec};

pub const DEFAULT_LAMBDA: f64 = 10.0;
/// Maximum step halvings per line search.
pub const MAX_HALVINGS: usize = 30;
/// λ escalation stages (λ, 10λ, …) before giving up.
pub const LAMBDA_STAGES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingAttackConfig {
    /// ℓ∞ tolerance on the scaled output.
    pub epsilon: f64,
    pub lambda: f64,
    /// Descent steps per λ stage.
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ScalingAttackConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, lambda: DEFAULT_LAMBDA, steps: 200, learning_rate: 1.0, seed: 0 }
    }
}

impl ScalingAttackConfig {
    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidArgument(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        if self.steps == 0 || !(self.lambda > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("steps, lambda and learning rate must be positive".into()));
        }
        Ok(())
    }
}

struct Objective<'a> {
    spec: &'a ScalerSpec,
    source: &'a Image,
    target: &'a Image,
    lambda: f64,
}

impl Objective<'_> {
    fn value(&self, a: &Image) -> Result<f64> {
        let d = a.diff(self.source)?;
        let r = scale(self.spec, a)?.diff(self.target)?;
        Ok(d.dot(&d) + self.lambda * r.dot(&r))
    }

    fn gradient(&self, a: &Image) -> Result<DiffImage> {
        let r = scale(self.spec, a)?.diff(self.target)?;
        let mut g = adjoint_scale(self.spec, &r)?.scale(2.0 * self.lambda);
        g.add_assign_scaled(&a.diff(self.source)?, 2.0);
        Ok(g)
    }
}

pub fn residual(spec: &ScalerSpec, a: &Image, target: &Image) -> Result<f64> {
    Ok(linf_norm(&scale(spec, a)?.diff(target)?))
}

/// Crafts an attack image for `(source, target)`. `queries` counts gradient
/// evaluations and `iterations` accepted descent steps.
pub fn craft(spec: &ScalerSpec, source: &Image, target: &Image, cfg: &ScalingAttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    spec.in_shape(source.channels()).ensure_eq(source.shape())?;
    spec.out_shape(source.channels()).ensure_eq(target.shape())?;

    let mut a = source.clone();
    let mut gradients = 0;
    let mut iterations = 0;
    let mut lambda = cfg.lambda;
    for _ in 0..LAMBDA_STAGES {
        if residual(spec, &a, target)? <= cfg.epsilon && lambda > cfg.lambda {
            break;
        }
        let obj = Objective { spec, source, target, lambda };
        let mut f = obj.value(&a)?;
        for _ in 0..cfg.steps {
            let g = obj.gradient(&a)?;
            gradients += 1;
            let mut t = cfg.learning_rate;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let candidate = a.add_scaled(&g, -t)?.clamp01();
                let step = candidate.diff(&a)?;
                let fc = obj.value(&candidate)?;
                // projected-gradient sufficient decrease
                if fc <= f + g.dot(&step) + step.dot(&step) / (2.0 * t) && fc <= f {
                    accepted = Some((candidate, fc, l2_norm(&step)));
                    break;
                }
                t *= 0.5;
            }
            let Some((candidate, fc, moved)) = accepted else { break };
            a = candidate;
            iterations += 1;
            let progress = f - fc;
            f = fc;
            if moved <= 1e-10 || progress <= 1e-14 * f.max(1e-300) {
                break;
            }
        }
        if residual(spec, &a, target)? <= cfg.epsilon {
            break;
        }
        lambda *= 10.0;
    }

    let mut result = AttackResult::measure(source, a, spec.beta())?;
    result.success = residual(spec, &result.image, target)? <= cfg.epsilon;
    result.queries = gradients;
    result.iterations = iterations;
    Ok(result)
}

/// Measurement record for a crafted image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingEvaluation {
    pub l2: f64,
    pub scaled_l2: f64,
    /// `‖scale(A) − T‖∞`
    pub residual: f64,
    /// Whether the model labels `scale(A)` differently from `scale(S)`.
    pub flip: bool,
}

pub fn evaluate(spec: &ScalerSpec, source: &Image, target: &Image, attack: &Image, model: Option<&Model>) -> Result<ScalingEvaluation> {
    let delta = attack.diff(source)?;
    let scaled = scale(spec, attack)?;
    let residual = linf_norm(&scaled.diff(target)?);
    let flip = match model {
        Some(m) => m.predict(&scaled)? != m.predict(&scale(spec, source)?)?,
        None => false,
    };
    Ok(ScalingEvaluation { l2: l2_norm(&delta), scaled_l2: scaled_l2(&delta, spec.beta())?, residual, flip })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;
    use crate::rng::RngState;
    use crate::scaling::{identify_mask, ScalerKind};

    fn random(rng: &mut RngState, shape: Shape) -> Image {
        Image::from_fn(shape, |_, _, _| rng.uniform())
    }

    #[test]
    fn identity_scaler_with_matching_target_is_a_no_op() {
        let mut rng = RngState::new(1);
        let spec = ScalerSpec::identity(ScalerKind::Bilinear, (6, 6)).unwrap();
        let s = random(&mut rng, spec.in_shape(1));
        let r = craft(&spec, &s, &s, &ScalingAttackConfig::default()).unwrap();
        assert_eq!(r.image, s);
        assert_eq!(r.l2, 0.0);
        assert!(r.success);
    }

    #[test]
    fn nearest_attack_only_touches_vulnerable_pixels() {
        let mut rng = RngState::new(2);
        let spec = ScalerSpec::with_ratio(ScalerKind::Nearest, (8, 8), 2).unwrap();
        let s = random(&mut rng, spec.in_shape(1));
        let t = random(&mut rng, spec.out_shape(1));
        let r = craft(&spec, &s, &t, &ScalingAttackConfig::default()).unwrap();
        assert!(r.success);
        let mask = identify_mask(&spec);
        for (i, (a, b)) in r.image.data().iter().zip(s.data()).enumerate() {
            if (a - b).abs() > 1e-6 {
                assert!(mask.bits()[i]);
            }
        }
        assert!(r.image.is_within_unit_box());
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        let spec = ScalerSpec::with_ratio(ScalerKind::Area, (4, 4), 2).unwrap();
        let s = Image::zeros(spec.in_shape(1));
        let t = Image::zeros(spec.out_shape(1));
        let bad = ScalingAttackConfig { epsilon: 1.5, ..Default::default() };
        assert!(craft(&spec, &s, &t, &bad).is_err());
        assert!(craft(&spec, &t, &t, &ScalingAttackConfig::default()).is_err());
    }

    #[test]
    fn evaluation_of_the_source_is_clean() {
        let mut rng = RngState::new(3);
        let spec = ScalerSpec::with_ratio(ScalerKind::Bilinear, (4, 4), 3).unwrap();
        let s = random(&mut rng, spec.in_shape(1));
        let t = scale(&spec, &s).unwrap();
        let e = evaluate(&spec, &s, &t, &s, None).unwrap();
        assert_eq!(e.residual, 0.0);
        assert!(!e.flip);
    }
}

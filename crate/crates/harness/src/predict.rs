//! Evaluation protocol for HR inputs and the 8-bit file boundary.

use scaleadv::attack_whitebox::{pipeline_forward, Pipeline, VOTE_FRACTION, VOTE_REPEATS};
use scaleadv::{Image, RngState};

use crate::error::{Error, Result};

/// Label of `hr` under the pipeline and the fraction of runs that produced
/// it. Deterministic pipelines run once regardless of `repeats`.
pub fn hr_predict(pipe: &Pipeline, hr: &Image, rng: &mut RngState, repeats: usize) -> Result<(usize, f64)> {
    if repeats == 0 {
        return Err(Error::Invalid("repeats must be >= 1".into()));
    }
    let runs = if pipe.is_randomized() { repeats } else { 1 };
    let mut counts = vec![0usize; pipe.model().class_count()];
    for _ in 0..runs {
        counts[pipeline_forward(pipe, hr, rng)?.1.label] += 1;
    }
    // ties go to the lowest label
    let (label, votes) = counts.iter().enumerate().fold((0, 0), |best, (i, &c)| if c > best.1 { (i, c) } else { best });
    Ok((label, votes as f64 / runs as f64))
}

/// The voting rule: correct only if at least 90% of the runs agree with the truth.
pub fn vote_passes(agreeing: usize, repeats: usize) -> bool {
    repeats > 0 && agreeing as f64 >= VOTE_FRACTION * repeats as f64
}

/// Whether `hr` counts as correctly classified as `y`: one run for
/// deterministic pipelines, 100 runs and the 90% rule for randomized ones.
pub fn hr_correct(pipe: &Pipeline, hr: &Image, y: usize, rng: &mut RngState) -> Result<bool> {
    if !pipe.is_randomized() {
        return Ok(pipeline_forward(pipe, hr, rng)?.1.label == y);
    }
    let mut agree = 0;
    for _ in 0..VOTE_REPEATS {
        agree += usize::from(pipeline_forward(pipe, hr, rng)?.1.label == y);
    }
    Ok(vote_passes(agree, VOTE_REPEATS))
}

/// Rounds every value to the nearest multiple of 1/255, halves rounding up.
pub fn quantize_boundary(img: &Image) -> Image {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = ((v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() / 255.0).min(1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use scaleadv::attack_whitebox::Defense;
    use scaleadv::classifier::Model;
    use scaleadv::defenses::{PreventionKind, PreventionSpec};
    use scaleadv::{ScalerKind, ScalerSpec, Shape};

    #[test]
    fn quantization_rounds_half_up_and_is_idempotent() {
        let img = Image::new(Shape::new(1, 4, 1), vec![0.5, 0.0, 1.0, 3.0 / 255.0]).unwrap();
        let q = quantize_boundary(&img);
        assert_eq!(q.data()[0], 128.0 / 255.0);
        assert_eq!(q.data()[1..], img.data()[1..]);
        assert_eq!(quantize_boundary(&q), q);
        let half = Image::new(Shape::new(1, 1, 1), vec![2.5 / 255.0]).unwrap();
        assert_eq!(quantize_boundary(&half).data()[0], 3.0 / 255.0);
    }

    #[test]
    fn voting_threshold() {
        assert!(vote_passes(95, 100));
        assert!(vote_passes(90, 100));
        assert!(!vote_passes(89, 100));
        assert!(!vote_passes(0, 0));
    }

    #[test]
    fn deterministic_pipeline_predicts_once() {
        let model = Model::init(1, Shape::new(8, 8, 1), 3).unwrap();
        let scaler = ScalerSpec::with_ratio(ScalerKind::Bilinear, (8, 8), 3).unwrap();
        let pipe = Pipeline::new(Defense::None, scaler.clone(), model.clone()).unwrap();
        let hr = Image::from_fn(pipe.hr_shape(), |r, c, _| ((r * 7 + c * 3) % 11) as f64 / 10.0);
        let mut rng = RngState::new(0);
        let (label, conf) = hr_predict(&pipe, &hr, &mut rng, 100).unwrap();
        assert_eq!(conf, 1.0);
        let lr = scaleadv::scaling::scale(&scaler, &hr).unwrap();
        assert_eq!(label, model.predict(&lr).unwrap());
        assert!(hr_predict(&pipe, &hr, &mut rng, 0).is_err());

        let spec = PreventionSpec::for_scaler(PreventionKind::Randomized, &scaler).unwrap();
        let rand = Pipeline::new(Defense::Prevention(spec), scaler, model).unwrap();
        let (_, conf) = hr_predict(&rand, &hr, &mut RngState::new(1), 100).unwrap();
        assert!(conf > 0.0 && conf <= 1.0);
    }
}

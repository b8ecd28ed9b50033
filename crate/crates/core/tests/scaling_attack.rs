use scaleadv::attack_scaling::{craft, evaluate, ScalingAttackConfig};
use scaleadv::dataset::HR_TEXTURE;
use scaleadv::scaling::identify_mask;
use scaleadv::{hr_source, synth_dataset, RngState, ScalerKind, ScalerSpec};

#[test]
fn bilinear_attack_succeeds_and_stays_on_vulnerable_pixels() {
    let mut rng = RngState::new(17);
    let ds = synth_dataset(&mut rng, 40, 28, 4).unwrap();
    let spec = ScalerSpec::with_ratio(ScalerKind::Bilinear, (28, 28), 4).unwrap();
    let mask = identify_mask(&spec);
    let cfg = ScalingAttackConfig::default();
    let mut successes = 0;
    for pair in ds.samples().chunks(2).take(20) {
        let source = hr_source(&pair[0].0, 4, HR_TEXTURE.1, &mut rng).unwrap();
        let target = &pair[1].0;
        let r = craft(&spec, &source, target, &cfg).unwrap();
        assert!(r.image.is_within_unit_box());
        let e = evaluate(&spec, &source, target, &r.image, None).unwrap();
        assert_eq!(r.success, e.residual <= cfg.epsilon);
        successes += usize::from(r.success);

        let (mut off_energy, mut total, mut off_abs, mut off_count) = (0.0, 0.0, 0.0, 0usize);
        for (i, (a, s)) in r.image.data().iter().zip(source.data()).enumerate() {
            let d = a - s;
            total += d * d;
            if !mask.bits()[i] {
                off_energy += d * d;
                off_abs += d.abs();
                off_count += 1;
            }
        }
        assert!(off_energy <= 1e-6 * total.max(f64::MIN_POSITIVE));
        assert!(off_abs / off_count as f64 <= 1e-3);
    }
    assert!(successes >= 18, "{successes}/20");
}

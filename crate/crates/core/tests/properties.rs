//! Algebraic properties of the scoring and loss primitives.

use promptkd::math::{
    argmax, feature_kd_loss, harmonic_mean, kd_loss, kd_loss_grad_student, l2_normalize, softmax, FeatureLossKind,
    FeatureVector, LogitVector, Temperature, NORM_EPS,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logits(v: &[f64]) -> LogitVector {
    LogitVector::new(v.to_vec()).unwrap()
}

fn feat(v: &[f64]) -> FeatureVector {
    FeatureVector::new(v.to_vec()).unwrap()
}

fn tie_free(v: &[f64]) -> bool {
    let m = v[argmax(v)];
    v.iter().filter(|&&x| (x - m).abs() < 1e-6).count() == 1
}

#[test]
fn kd_of_identical_logits_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let n = rng.random_range(2..=100);
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let tau = Temperature::new(rng.random_range(0.5..=4.0)).unwrap();
        let l = kd_loss(&logits(&q), &logits(&q), tau).unwrap();
        assert!(l.abs() < 1e-9, "kd(q, q) = {l}");
    }
}

#[test]
fn harmonic_means_of_reported_accuracies() {
    assert!((harmonic_mean(86.96, 80.73).unwrap() - 83.73).abs() < 0.01);
    assert!((harmonic_mean(77.60, 70.73).unwrap() - 74.01).abs() < 0.01);
    assert!((harmonic_mean(0.5, 0.5).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn kd_of_uniform_student_against_one_hot_teacher() {
    // Teacher mass concentrated on class 0; student uniform over 4 classes.
    let t = logits(&[200.0, 0.0, 0.0, 0.0]);
    let s = logits(&[0.0; 4]);
    let l = kd_loss(&t, &s, Temperature::new(1.0).unwrap()).unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        q in prop::collection::vec(-30.0f64..30.0, 2..64),
        c in -50.0f64..50.0,
        tau in 0.1f64..8.0,
    ) {
        let tau = Temperature::new(tau).unwrap();
        let p = softmax(&logits(&q), tau);
        let sum: f64 = p.as_slice().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        let shifted: Vec<f64> = q.iter().map(|x| x + c).collect();
        let ps = softmax(&logits(&shifted), tau);
        for (a, b) in p.as_slice().iter().zip(ps.as_slice()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_keeps_the_argmax_at_every_temperature(
        q in prop::collection::vec(-10.0f64..10.0, 2..64),
        tau in 0.05f64..20.0,
    ) {
        prop_assume!(tie_free(&q));
        let p = softmax(&logits(&q), Temperature::new(tau).unwrap());
        prop_assert_eq!(p.argmax(), argmax(&q));
    }

    #[test]
    fn kd_is_nonnegative_and_flat_at_the_teacher(
        qt in prop::collection::vec(-10.0f64..10.0, 2..50),
        noise in prop::collection::vec(-3.0f64..3.0, 50),
        tau in 0.5f64..4.0,
    ) {
        let tau = Temperature::new(tau).unwrap();
        let t = logits(&qt);
        let qs: Vec<f64> = qt.iter().zip(&noise).map(|(a, b)| a + b).collect();
        prop_assert!(kd_loss(&t, &logits(&qs), tau).unwrap() >= -1e-12);
        let g = kd_loss_grad_student(&t, &t, tau).unwrap();
        prop_assert!(g.iter().all(|x| x.abs() < 1e-8));
    }

    #[test]
    fn kd_gradient_sums_to_zero(
        qt in prop::collection::vec(-10.0f64..10.0, 2..30),
        qs_seed in any::<u64>(),
        tau in 0.5f64..4.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(qs_seed);
        let qs: Vec<f64> = qt.iter().map(|_| rng.random_range(-10.0..10.0)).collect();
        let g = kd_loss_grad_student(&logits(&qt), &logits(&qs), Temperature::new(tau).unwrap()).unwrap();
        prop_assert!(g.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn harmonic_mean_is_symmetric_and_bounded(a in 1e-3f64..1.0, b in 1e-3f64..1.0) {
        let h = harmonic_mean(a, b).unwrap();
        prop_assert!((h - harmonic_mean(b, a).unwrap()).abs() < 1e-15);
        prop_assert!(h >= a.min(b) - 1e-12 && h <= a.max(b) + 1e-12);
        prop_assert!(h <= (a + b) / 2.0 + 1e-12);
    }

    #[test]
    fn normalize_is_idempotent_and_scale_invariant(
        v in prop::collection::vec(-5.0f64..5.0, 1..64),
        c in 1e-3f64..1e3,
    ) {
        let x = feat(&v);
        prop_assume!(x.norm() > 1e-3);
        let once = l2_normalize(&x, NORM_EPS).unwrap();
        let twice = l2_normalize(&once, NORM_EPS).unwrap();
        let scaled = l2_normalize(&feat(&v.iter().map(|e| e * c).collect::<Vec<_>>()), NORM_EPS).unwrap();
        prop_assert!((once.norm() - 1.0).abs() < 1e-9);
        for i in 0..v.len() {
            prop_assert!((once.as_slice()[i] - twice.as_slice()[i]).abs() < 1e-9);
            prop_assert!((once.as_slice()[i] - scaled.as_slice()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn feature_losses_vanish_on_equal_inputs_and_scale_homogeneously(
        t in prop::collection::vec(-2.0f64..2.0, 1..40),
        d in prop::collection::vec(-2.0f64..2.0, 40),
        c in 0.1f64..10.0,
    ) {
        let s: Vec<f64> = t.iter().zip(&d).map(|(a, b)| a + b).collect();
        for kind in [FeatureLossKind::L1, FeatureLossKind::Mse] {
            prop_assert_eq!(feature_kd_loss(&feat(&t), &feat(&t), kind).unwrap(), 0.0);
            let base = feature_kd_loss(&feat(&t), &feat(&s), kind).unwrap();
            let ct: Vec<f64> = t.iter().map(|x| x * c).collect();
            let cs: Vec<f64> = s.iter().map(|x| x * c).collect();
            let scaled = feature_kd_loss(&feat(&ct), &feat(&cs), kind).unwrap();
            let power = if kind == FeatureLossKind::L1 { c } else { c * c };
            prop_assert!((scaled - power * base).abs() <= 1e-9 * (1.0 + scaled.abs()));
        }
    }

    #[test]
    fn decisions_ignore_the_logit_scale(
        q in prop::collection::vec(-1.0f64..1.0, 2..40),
        scale in 0.5f64..100.0,
    ) {
        prop_assume!(tie_free(&q));
        let scaled: Vec<f64> = q.iter().map(|x| x * scale).collect();
        prop_assert_eq!(argmax(&scaled), argmax(&q));
    }
}

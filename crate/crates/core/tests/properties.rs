use mcl_core::data::{augment, normalize_pixels, synth_generate, AugmentParams};
use mcl_core::eval::{ced_curve, default_thresholds, EvalReport, FAILURE_THRESHOLD};
use mcl_core::geometry::{clusters_for_pattern, LabelingPattern};
use mcl_core::loss::{
    group_weights, loss_gradient_coords, multicenter_weights, weighted_loss_coords, weights_from_errors, ErrorProfile,
    ModelKind,
};
use mcl_core::Tensor;
use proptest::prelude::*;

fn pattern() -> impl Strategy<Value = LabelingPattern> {
    prop_oneof![
        Just(LabelingPattern::Five),
        Just(LabelingPattern::TwentyNine),
        Just(LabelingPattern::SixtyEight)
    ]
}

fn profile(errors: Vec<f64>) -> ErrorProfile {
    ErrorProfile {
        errors,
        source: ModelKind::Basic,
    }
}

/// A pattern with strictly positive per-landmark errors.
fn pattern_and_errors() -> impl Strategy<Value = (LabelingPattern, Vec<f64>)> {
    pattern().prop_flat_map(|p| (Just(p), prop::collection::vec(1e-4..1.0f64, p.landmarks())))
}

proptest! {
    #[test]
    fn error_weights_sum_to_n((p, eps) in pattern_and_errors()) {
        let u = weights_from_errors(&profile(eps)).unwrap();
        prop_assert!((u.sum() - p.landmarks() as f64).abs() < 1e-9);
        prop_assert!(u.u.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn error_weights_ignore_scale((_p, eps) in pattern_and_errors(), c in 1e-3..1e3f64) {
        let a = weights_from_errors(&profile(eps.clone())).unwrap();
        let b = weights_from_errors(&profile(eps.iter().map(|e| e * c).collect())).unwrap();
        for (x, y) in a.u.iter().zip(&b.u) {
            prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn cluster_weights_sum_to_n_and_keep_group_masses(
        (p, eps) in pattern_and_errors(),
        pick in any::<prop::sample::Index>(),
        alpha in 1.5..500.0f64,
    ) {
        let part = clusters_for_pattern(p);
        let i = pick.index(part.len());
        let u = multicenter_weights(i, &profile(eps), &part, alpha).unwrap();
        let n = p.landmarks() as f64;
        prop_assert!((u.sum() - n).abs() < 1e-9);
        let size = part.cluster(i).len();
        let (up, uq) = group_weights(p.landmarks(), size, alpha);
        let inside: f64 = part.cluster(i).iter().map(|&j| u.u[j]).sum();
        prop_assert!((inside - up * size as f64).abs() < 1e-9);
        prop_assert!((n - inside - uq * (n - size as f64)).abs() < 1e-9);
    }

    #[test]
    fn group_weights_ratio_and_constraint(n in 2usize..200, frac in 0.0..1.0f64, alpha in 1.0001..1e4f64) {
        let p = 1 + ((n - 1) as f64 * frac) as usize % (n - 1);
        let (up, uq) = group_weights(n, p, alpha);
        prop_assert!((up / uq - alpha).abs() < 1e-9 * alpha);
        prop_assert!((up * p as f64 + uq * (n - p) as f64 - n as f64).abs() < 1e-9 * n as f64);
    }

    #[test]
    fn group_weights_tend_to_uniform_as_alpha_falls_to_one(n in 2usize..200, frac in 0.0..1.0f64) {
        let p = 1 + ((n - 1) as f64 * frac) as usize % (n - 1);
        let (up, uq) = group_weights(n, p, 1.0 + 1e-12);
        prop_assert!((up - 1.0).abs() < 1e-9 && (uq - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_is_linear_in_weights(
        (pred, gt, u1, u2) in (1usize..20).prop_flat_map(|n| (
            prop::collection::vec(-1.0..2.0f64, 2 * n),
            prop::collection::vec(-1.0..2.0f64, 2 * n),
            prop::collection::vec(0.0..5.0f64, n),
            prop::collection::vec(0.0..5.0f64, n),
        )),
        d in 0.05..2.0f64,
    ) {
        let sum: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a + b).collect();
        let g1 = loss_gradient_coords(&pred, &gt, &u1, d).unwrap();
        let g2 = loss_gradient_coords(&pred, &gt, &u2, d).unwrap();
        let g = loss_gradient_coords(&pred, &gt, &sum, d).unwrap();
        for k in 0..g.len() {
            prop_assert!((g[k] - g1[k] - g2[k]).abs() < 1e-9 * (1.0 + g[k].abs()));
        }
        let l = weighted_loss_coords(&pred, &gt, &sum, d).unwrap();
        let l12 = weighted_loss_coords(&pred, &gt, &u1, d).unwrap() + weighted_loss_coords(&pred, &gt, &u2, d).unwrap();
        prop_assert!((l - l12).abs() < 1e-9 * (1.0 + l.abs()));
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn ced_is_monotone_and_matches_failure_rate(errors in prop::collection::vec(0.0..0.3f64, 1..200)) {
        let t = default_thresholds();
        let c = ced_curve(&errors, &t).unwrap();
        prop_assert!(c.fractions.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(c.fractions.iter().all(|&f| (0.0..=1.0).contains(&f)));
        let k = t.iter().position(|&x| x == FAILURE_THRESHOLD).unwrap();
        let r = EvalReport::from_errors(errors.clone()).unwrap();
        let ok = errors.iter().filter(|&&e| e <= FAILURE_THRESHOLD).count();
        prop_assert_eq!(ok + errors.iter().filter(|&&e| e > FAILURE_THRESHOLD).count(), errors.len());
        prop_assert!((r.failure_rate - 100.0 * (1.0 - c.fractions[k])).abs() < 1e-12);
    }

    #[test]
    fn report_ignores_sample_order(errors in prop::collection::vec(0.0..0.3f64, 1..100), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = errors.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = EvalReport::from_errors(errors).unwrap();
        let b = EvalReport::from_errors(shuffled).unwrap();
        prop_assert!((a.mean_error - b.mean_error).abs() < 1e-9);
        prop_assert_eq!(a.failure_rate, b.failure_rate);
    }

    #[test]
    fn normalization_is_affine_and_monotone(a in 0u8..=255, b in 0u8..=255) {
        let t = Tensor::from_vec(&[2], vec![f32::from(a), f32::from(b)]).unwrap();
        let n = normalize_pixels(&t);
        let (x, y) = (n.data()[0], n.data()[1]);
        prop_assert_eq!(x, (f32::from(a) - 128.0) / 128.0);
        prop_assert_eq!(a.cmp(&b), x.partial_cmp(&y).unwrap());
        prop_assert!((-1.0..1.0).contains(&x));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn augmented_landmarks_stay_near_the_patch(
        seed in 0u64..1000,
        rot in -15.0..15.0f64,
        scale in 0.9..1.1f64,
        tx in -0.05..0.05f64,
        ty in -0.05..0.05f64,
        flip in any::<bool>(),
    ) {
        let face = &synth_generate(LabelingPattern::SixtyEight, 1, seed).unwrap().samples[0];
        let params = AugmentParams {
            rotation_degrees: vec![rot],
            scale_factors: vec![scale],
            translation_offsets: vec![tx, ty],
            do_flip: flip,
            compression_qualities: vec![],
            max_outputs: None,
        };
        let out = augment(face, &params, 0).unwrap();
        prop_assert_eq!(out.samples.len() + out.skipped, 4 * if flip { 2 } else { 1 });
        for s in &out.samples {
            prop_assert_eq!(s.image.dims(), &[50, 50, 1]);
            let b = s.shape.bounds(None);
            prop_assert!(b[0] >= -0.2 && b[1] >= -0.2 && b[2] <= 1.2 && b[3] <= 1.2, "{:?}", b);
        }
    }
}

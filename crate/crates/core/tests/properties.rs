use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ridgeforge_core::appearance::{appearance_distance, AppearanceFilterConfig, ImageGrid};
use ridgeforge_core::contrastive::{contrastive_term, id_distance, EmbeddingModel};
use ridgeforge_core::eval::{score_histogram, tar_at_far, ScoreSet, StatSummary};
use ridgeforge_core::latent::{make_training_batch, LatentDims, PairKind, PairingConfig};
use ridgeforge_core::recognition::{
    adapt_first_stage, reference_arch, BackboneFamily, BackboneSpec, Recognizer,
};
use ridgeforge_core::Error;

/// Smallest threshold meeting the FAR bound, found by trying every score,
/// its float neighbours and both infinities,
/// ignoring thresholds below every score (they all accept everything).
fn scan_oracle(s: &ScoreSet, far: f64) -> (f64, f64) {
    let mut cands: Vec<f64> = vec![f64::NEG_INFINITY, f64::INFINITY];
    for &v in s.genuine.iter().chain(&s.impostor) {
        cands.extend([v, v.next_up(), v.next_down()]);
    }
    let lowest = s.genuine.iter().chain(&s.impostor).copied().fold(f64::INFINITY, f64::min);
    cands.retain(|&t| t >= lowest);
    cands.sort_by(f64::total_cmp);
    let frac = |xs: &[f64], t: f64| xs.iter().filter(|&&x| x >= t).count() as f64 / xs.len() as f64;
    let t = cands.into_iter().find(|&t| frac(&s.impostor, t) <= far).unwrap();
    (t, frac(&s.genuine, t))
}

fn scores(max: usize) -> impl Strategy<Value = ScoreSet> {
    // coarse grid values so ties are common
    let score = (-20i32..=20).prop_map(|k| k as f64 / 20.0);
    (prop::collection::vec(score.clone(), 1..=max), prop::collection::vec(score, 1..=max))
        .prop_map(|(genuine, impostor)| ScoreSet { genuine, impostor })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn batch_plan_relations_are_recoverable(
        batch in 1usize..24,
        same_id in 0usize..8,
        same_app in 0usize..8,
        id in 1usize..6,
        app in 1usize..6,
        seed in any::<u64>(),
    ) {
        let pairing = PairingConfig { num_same_id_pairs: same_id, num_same_app_pairs: same_app };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res = make_training_batch(&mut rng, batch, pairing, LatentDims::new(id, app));
        if pairing.slots_needed() > batch {
            prop_assert!(matches!(res, Err(Error::Config(_))));
        } else {
            let plan = res.unwrap();
            prop_assert_eq!(plan.len(), batch);
            prop_assert_eq!(plan.count(PairKind::SameId), same_id);
            prop_assert_eq!(plan.count(PairKind::SameApp), same_app);
            let mut declared = plan.relations().to_vec();
            declared.sort_by_key(|r| (r.index_a, r.index_b));
            prop_assert_eq!(plan.recover_relations(), declared);
            plan.validate().unwrap();
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn tar_at_far_is_tight(s in scores(20), far in 0.0f64..=1.0) {
        let got = tar_at_far(&s, far).unwrap();
        let (t, tar) = scan_oracle(&s, far);
        prop_assert_eq!(got.threshold, t);
        prop_assert_eq!(got.tar, tar);
        prop_assert!(got.achieved_far <= far);
    }

    #[test]
    fn tar_at_far_is_monotone(s in scores(20), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(tar_at_far(&s, lo).unwrap().tar <= tar_at_far(&s, hi).unwrap().tar);
    }

    #[test]
    fn stat_summary_matches_two_pass(values in prop::collection::vec(-1e3f64..1e3, 1..50)) {
        let s = StatSummary::from_values(&values).unwrap();
        let n = values.len() as f64;
        let mut mean = 0.0;
        for v in &values {
            mean += v;
        }
        mean /= n;
        let mut ss = 0.0;
        for v in &values {
            ss += (v - mean).powi(2);
        }
        prop_assert!((s.mean - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
        prop_assert!((s.std - (ss / n).sqrt()).abs() <= 1e-9 * (1.0 + s.std));
        prop_assert!(s.std >= 0.0);
    }

    #[test]
    fn histogram_columns_are_normalized(s in scores(40), bins in 1usize..30) {
        let h = score_histogram(&s, bins).unwrap();
        prop_assert!((h.genuine.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((h.impostor.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(h.edges.len(), bins + 1);
    }

    #[test]
    fn hinge_terms_are_nonnegative_and_vanish_inside_margins(
        d in 0.0f64..2.0,
        tp in 0.0f64..0.5,
        gap in 1e-3f64..1.0,
        cp in 0.1f64..4.0,
        cm in 0.1f64..4.0,
    ) {
        let tm = tp + gap;
        let same = contrastive_term(d, true, tp, tm, cp, cm);
        let diff = contrastive_term(d, false, tp, tm, cp, cm);
        prop_assert!(same >= 0.0 && diff >= 0.0);
        prop_assert_eq!(same == 0.0, d <= tp);
        prop_assert_eq!(diff == 0.0, d >= tm);
    }

    #[test]
    fn id_distance_is_bounded_and_symmetric(
        a in prop::collection::vec(-5.0f64..5.0, 4),
        b in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        prop_assume!(a.iter().any(|&v| v.abs() > 1e-3) && b.iter().any(|&v| v.abs() > 1e-3));
        let d = id_distance(&a, &b).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
        prop_assert_eq!(d, id_distance(&b, &a).unwrap());
    }

    #[test]
    fn appearance_distance_is_a_symmetric_nonnegative_dissimilarity(
        a in prop::collection::vec(0.0f64..=1.0, 64),
        b in prop::collection::vec(0.0f64..=1.0, 64),
    ) {
        let cfg = AppearanceFilterConfig::for_resolution(8);
        let (ia, ib) = (ImageGrid::new(8, 8, a).unwrap(), ImageGrid::new(8, 8, b).unwrap());
        let d = appearance_distance(&ia, &ib, &cfg).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - appearance_distance(&ib, &ia, &cfg).unwrap()).abs() < 1e-15);
        prop_assert_eq!(appearance_distance(&ia, &ia, &cfg).unwrap(), 0.0);
    }
}

#[test]
fn stride_halves_for_every_backbone() {
    for family in BackboneFamily::ALL {
        for &variant in family.variants() {
            let base = reference_arch(family, variant).unwrap().total_stride();
            let spec = BackboneSpec::new(family, variant, true);
            let adapted = adapt_first_stage(&spec).unwrap().total_stride();
            assert_eq!(adapted * 2, base, "{spec}");
            let kept = adapt_first_stage(&BackboneSpec::new(family, variant, false)).unwrap().total_stride();
            assert_eq!(kept, base, "{spec}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn embeddings_are_unit_norm(pixels in prop::collection::vec(0.0f64..=1.0, 256), seed in any::<u64>()) {
        let spec = BackboneSpec { embedding_dim: 16, ..BackboneSpec::new(BackboneFamily::ResnetLike, "toy", true) };
        let model = Recognizer::new(&spec, 16, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let img = ImageGrid::new(16, 16, pixels).unwrap();
        let e = model.embed(&[img.clone(), img]).unwrap();
        let norm = e[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-6);
        prop_assert_eq!(&e[0], &e[1]);
        prop_assert_eq!(e[0].len(), 16);
    }
}

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use t2s_core::caption::{select_best, truncate_tokens};
use t2s_core::dataset::{
    denormalize, make_mixed_batch, normalize, segment_series, CaptionedSample, Dataset, Level, NormScheme,
};
use t2s_core::flow::{forward_path, guided_velocity, target_velocity};
use t2s_core::metrics::{first_relevant_rank, mrr_at_10, wape};
use t2s_core::tensor::Matrix;
use t2s_core::text::{ConditionEmbedding, OfflineEncoder, TextEncoder};

fn matrix(n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-10.0f64..10.0, n * n).prop_map(move |v| Matrix::from_vec(n, n, v))
}

fn series(min: usize, max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, min..max)
}

proptest! {
    #[test]
    fn path_matches_velocity_form(z0 in matrix(3), z1 in matrix(3), t in 0.0f64..=1.0) {
        let zt = forward_path(&z0, &z1, t).unwrap();
        let v = target_velocity(&z0, &z1).unwrap();
        let alt = z0.zip_map(&v, |a, b| a + t * b);
        prop_assert!(zt.max_abs_diff(&alt) <= 1e-12 * 40.0);
    }

    #[test]
    fn guidance_fixed_point(u in matrix(3), delta in 0.0f64..20.0) {
        prop_assert_eq!(guided_velocity(&u, &u, delta).unwrap(), u);
    }

    #[test]
    fn negative_guidance_rejected(u in matrix(2), delta in -10.0f64..-1e-9) {
        prop_assert!(guided_velocity(&u, &u, delta).is_err());
    }

    #[test]
    fn segments_concatenate_back(s in series(2, 60), cuts in prop::collection::btree_set(1usize..59, 0..5)) {
        let cuts: Vec<usize> = cuts.into_iter().filter(|&c| c < s.len()).collect();
        let parts = segment_series(&s, &cuts).unwrap();
        prop_assert_eq!(parts.len(), cuts.len() + 1);
        prop_assert!(parts.iter().all(|p| !p.is_empty()));
        prop_assert_eq!(parts.concat(), s);
    }

    #[test]
    fn normalize_round_trip(s in series(2, 50), z in any::<bool>()) {
        let scheme = if z { NormScheme::Zscore } else { NormScheme::Minmax };
        let (n, params) = normalize(&s, scheme);
        let back = denormalize(&n, &params);
        let scale = s.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let spread = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - s.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-9 {
            for (a, b) in s.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-12 * scale * 10.0);
            }
        }
        if !z && spread > 1e-9 {
            prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mixed_batch_groups_by_length(lens in prop::collection::vec(prop::sample::select(vec![24usize, 48, 96]), 1..12), b in 1usize..40, seed in any::<u64>()) {
        let samples: Vec<CaptionedSample> = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| CaptionedSample {
                series: vec![0.0; l],
                caption: format!("c{i}"),
                level: Level::Instance,
                domain: String::new(),
                source_id: i.to_string(),
            })
            .collect();
        let d = [Dataset::new("d", samples).unwrap()];
        let batch = make_mixed_batch(&d, b, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(batch.values().map(Vec::len).sum::<usize>(), b);
        for (len, group) in &batch {
            prop_assert!(!group.is_empty());
            prop_assert!(group.iter().all(|s| s.len() == *len));
        }
    }

    #[test]
    fn wape_is_scale_invariant(y in series(1, 30), k in prop::sample::select(vec![0.25, 0.5, 2.0, 8.0, -4.0])) {
        let g: Vec<f64> = y.iter().map(|v| v * 0.9 + 1.0).collect();
        prop_assume!(y.iter().any(|v| *v != 0.0));
        let a = wape(&[y.clone()], &[g.clone()]).unwrap();
        let ys: Vec<f64> = y.iter().map(|v| v * k).collect();
        let gs: Vec<f64> = g.iter().map(|v| v * k).collect();
        prop_assert_eq!(a, wape(&[ys], &[gs]).unwrap());
    }

    #[test]
    fn mrr_bounds_and_rank(truth in series(2, 8), noise in prop::collection::vec(-1.0f64..1.0, 80), threshold in 0.0f64..0.99) {
        let len = truth.len();
        let cands: Vec<Vec<f64>> = (0..10)
            .map(|r| truth.iter().enumerate().map(|(i, v)| v + 20.0 * noise[(r * len + i) % 80]).collect())
            .collect();
        let m = mrr_at_10(&[cands.clone()], &[truth.clone()], threshold).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        let expect = first_relevant_rank(&cands, &truth, threshold).map_or(0.0, |r| 1.0 / r as f64);
        prop_assert_eq!(m, expect);
    }

    #[test]
    fn selection_follows_permutation(raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..7), seed in any::<u64>()) {
        let e: Vec<ConditionEmbedding> = raw.into_iter().map(ConditionEmbedding::new).collect();
        let names: Vec<String> = (0..e.len()).map(|i| i.to_string()).collect();
        let best = select_best(&names, &e).unwrap();
        // a shuffle can only change which of several tied maxima comes first
        let mut perm: Vec<usize> = (0..e.len()).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pe: Vec<ConditionEmbedding> = perm.iter().map(|&i| e[i].clone()).collect();
        let pbest = select_best(&names, &pe).unwrap();
        let scores = t2s_core::caption::candidate_scores(&e).unwrap();
        prop_assert!((scores[perm[pbest]] - scores[best]).abs() <= 1e-12);
    }

    #[test]
    fn truncation_respects_limit(words in prop::collection::vec("[a-z]{1,6}", 0..40), m in 1usize..20) {
        let text = words.join("  ");
        let out = truncate_tokens(&text, m);
        prop_assert!(out.split_whitespace().count() <= m);
        prop_assert!(text.split_whitespace().collect::<Vec<_>>().starts_with(&out.split_whitespace().collect::<Vec<_>>()));
    }

    #[test]
    fn offline_encoder_is_deterministic(caption in "[a-z][a-z ]{0,39}") {
        let a = OfflineEncoder::new(32).encode(&caption).unwrap();
        let b = OfflineEncoder::new(32).encode(&caption).unwrap();
        prop_assert_eq!(a.vector(), b.vector());
        prop_assert!(!a.is_null());
    }
}

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use eventdistill::distill::{
    ascending_ranks, curriculum_mask, decouple_target, dkd_loss, masked_nontarget_count,
    nontarget_distribution, softmax, truncate_teacher, MaskVector,
};
use eventdistill::evaluator::{metrics_from_ranks, rank_of_target};
use eventdistill::event_data::{
    popularity_negatives, prepare_dataset, read_records, synth_generate, window_ranges,
    write_records, PrepareOptions, SynthConfig,
};

fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 2..max_len)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(z in logits(40)) {
        let p = softmax(&z).unwrap();
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shift_invariance(z in logits(30), c in -100.0f64..100.0, t in 0usize..30) {
        let t = t % z.len();
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let a = decouple_target(&z, t).unwrap();
        let b = decouple_target(&shifted, t).unwrap();
        prop_assert!((a.target - b.target).abs() < 1e-9);
        prop_assert!((a.target + a.rest - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nontarget_support_matches_mask(z in logits(30), t in 0usize..30, seed in any::<u64>()) {
        let n = z.len();
        let t = t % n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let freqs: Vec<f64> = (0..n).map(|i| (i % 5) as f64).collect();
        let mask = curriculum_mask(0.3, 0.7, t, &freqs, 1.0, &mut rng);
        prop_assert!(mask.is_masked(t));
        prop_assume!(mask.kept_count() > 0);
        let q = nontarget_distribution(&z, t, &mask).unwrap();
        for (i, v) in q.iter().enumerate() {
            if mask.is_masked(i) {
                prop_assert_eq!(*v, 0.0);
            }
        }
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn masked_count_shrinks_with_progress(n in 1usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let early = masked_nontarget_count(lo, 0.7, n);
        let late = masked_nontarget_count(hi, 0.7, n);
        prop_assert!(late <= early);
        prop_assert!(early < n);
    }

    #[test]
    fn dkd_is_minimised_by_the_teacher(z in logits(20), t in 0usize..20, beta in 0.0f64..3.0) {
        let t = t % z.len();
        let other: Vec<f64> = z.iter().rev().copied().collect();
        let at_teacher = dkd_loss(&z, &z, t, beta).unwrap();
        let elsewhere = dkd_loss(&other, &z, t, beta).unwrap();
        prop_assert!(at_teacher <= elsewhere + 1e-9);
    }

    #[test]
    fn ascending_ranks_are_a_permutation(v in prop::collection::vec(-5.0f64..5.0, 0..64)) {
        let mut r = ascending_ranks(&v);
        r.sort_unstable();
        prop_assert_eq!(r, (0..v.len()).collect::<Vec<_>>());
    }

    #[test]
    fn truncation_only_resets_to_one(
        a in prop::collection::vec(0.0f64..1.0, 1..100),
        seed in any::<u64>(),
        eps in 0.0f64..0.5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rand::Rng::random(&mut rng)).collect();
        let out = truncate_teacher(&[a.clone(), b.clone()], eps);
        for m in 0..a.len() {
            let reset = out[0][m] == 1.0 && out[1][m] == 1.0;
            prop_assert!(reset || (out[0][m] == a[m] && out[1][m] == b[m]));
        }
    }

    #[test]
    fn rank_bounds(scores in prop::collection::vec(-3.0f64..3.0, 1..120), t in 0usize..120) {
        let t = t % scores.len();
        let r = rank_of_target(&scores, t).unwrap();
        prop_assert!(r >= 1 && r <= scores.len());
        let higher = scores.iter().enumerate().filter(|&(i, &s)| i != t && s >= scores[t]).count();
        prop_assert_eq!(r, higher + 1);
    }

    #[test]
    fn metrics_are_bounded_and_monotone(ranks in prop::collection::vec(1usize..200, 1..300)) {
        let m = metrics_from_ranks(&ranks, &[1, 5, 10, 50]).unwrap();
        let mut prev_hr = 0.0;
        let mut prev_ndcg = 0.0;
        for n in [1, 5, 10, 50] {
            let (hr, ndcg) = (m.hr_at(n), m.ndcg_at(n));
            prop_assert!((0.0..=1.0).contains(&hr) && ndcg <= hr + 1e-12);
            prop_assert!(hr >= prev_hr && ndcg >= prev_ndcg);
            prev_hr = hr;
            prev_ndcg = ndcg;
        }
        prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0);
        prop_assert!((m.hr_at(1) - m.ndcg_at(1)).abs() < 1e-12);
    }

    #[test]
    fn windows_tile_the_sequence(len in 0usize..300, max_len in 1usize..50) {
        let w = window_ranges(len, max_len);
        let mut next = 0;
        for r in &w {
            prop_assert_eq!(r.start, next);
            prop_assert!(r.end - r.start <= max_len && r.end > r.start);
            next = r.end;
        }
        prop_assert_eq!(next, len);
        prop_assert!(w.iter().skip(1).all(|r| r.end - r.start == max_len));
    }

    #[test]
    fn negatives_are_distinct_and_exclude(seed in any::<u64>(), n in 1usize..30) {
        let weights: Vec<f64> = (0..40).map(|i| (i % 7) as f64).collect();
        let exclude: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let picked = popularity_negatives(&weights, &exclude, n, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(picked.iter().all(|&i| !exclude[i as usize] && weights[i as usize] > 0.0));
        let eligible = (0..40).filter(|&i| !exclude[i] && weights[i] > 0.0).count();
        prop_assert_eq!(picked.len(), n.min(eligible));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prepared_bundles_are_consistent(seed in any::<u64>(), max_len in 3usize..12) {
        let sc = SynthConfig { n_spots: 12, n_classes: 10, min_len: 5, max_len: 15, ..Default::default() };
        let data = synth_generate(&sc, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let opts = PrepareOptions { max_len, negatives: 5, seed, ..Default::default() };
        let b = prepare_dataset(&data.records, &opts).unwrap();
        let n = b.n_classes() as u32;
        prop_assert_eq!(b.val.len(), b.manifest.stats.spots);
        prop_assert_eq!(b.test.len(), b.manifest.stats.spots);
        for s in &b.train {
            prop_assert!(s.target < n && !s.input.is_empty() && s.input.len() < max_len);
        }
        for p in b.val.iter().chain(&b.test) {
            prop_assert!(p.target < n && !p.negatives.contains(&p.target));
            prop_assert!(p.negatives.iter().all(|&x| x < n));
        }
    }

    #[test]
    fn records_roundtrip_through_csv(seed in any::<u64>()) {
        let sc = SynthConfig { n_spots: 4, n_classes: 6, min_len: 3, max_len: 6, ..Default::default() };
        let data = synth_generate(&sc, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, &data.records).unwrap();
        let back = read_records(&buf[..], &Default::default()).unwrap();
        prop_assert!(back.rejected.is_empty());
        prop_assert_eq!(back.records, data.records);
    }
}

#[test]
fn target_only_mask_keeps_everything_else() {
    let m = MaskVector::target_only(5, 2);
    assert_eq!(m.kept_count(), 4);
}

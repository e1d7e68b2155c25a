use rand::seq::index::sample_weighted;
use rand::Rng;

/// Default number of sampled negatives per held-out target.
pub const DEFAULT_NEGATIVES: usize = 100;

/// Samples up to `n` distinct ids without replacement, with probability
/// proportional to `weights[id]`, skipping `exclude`d ids and ids of zero
/// weight. Returns fewer than `n` ids (with a warning) when not enough ids
/// are eligible. The result is sorted.
pub fn popularity_negatives<R: Rng + ?Sized>(
    weights: &[f64],
    exclude: &[bool],
    n: usize,
    rng: &mut R,
) -> Vec<u32> {
    debug_assert_eq!(weights.len(), exclude.len());
    let eligible: Vec<u32> = (0..weights.len() as u32)
        .filter(|&i| !exclude[i as usize] && weights[i as usize] > 0.0)
        .collect();
    if eligible.len() < n {
        log::warn!(
            "only {} eligible negatives, wanted {n}; using all of them",
            eligible.len()
        );
    }
    let mut picked: Vec<u32> = sample_weighted(
        rng,
        eligible.len(),
        |j| weights[eligible[j] as usize],
        n.min(eligible.len()),
    )
    .map(|iv| iv.into_iter().map(|j| eligible[j]).collect())
    .unwrap_or_default();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn never_returns_excluded_or_duplicates() {
        let weights = vec![1.0; 300];
        let mut exclude = vec![false; 300];
        for i in (0..300).step_by(7) {
            exclude[i] = true;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let neg = popularity_negatives(&weights, &exclude, 100, &mut rng);
        assert_eq!(neg.len(), 100);
        assert!(neg.iter().all(|&i| !exclude[i as usize]));
        let mut dedup = neg.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 100);
    }

    #[test]
    fn uniform_weights_give_uniform_inclusion() {
        // 20 eligible ids, 5 drawn per trial: each id included w.p. 1/4.
        let weights = vec![2.0; 20];
        let exclude = vec![false; 20];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials = 10_000;
        let mut counts = vec![0f64; 20];
        for _ in 0..trials {
            for i in popularity_negatives(&weights, &exclude, 5, &mut rng) {
                counts[i as usize] += 1.0;
            }
        }
        let expected = trials as f64 * 5.0 / 20.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 19 degrees of freedom, 0.999 quantile is about 43.8.
        assert!(chi2 < 43.8, "chi2 = {chi2}");
    }

    #[test]
    fn zero_frequency_never_sampled() {
        let weights = vec![0.0, 3.0, 1.0, 5.0];
        let exclude = vec![false; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let neg = popularity_negatives(&weights, &exclude, 2, &mut rng);
            assert!(!neg.contains(&0));
        }
        // Smoothed weights make it eligible.
        let smoothed: Vec<f64> = weights.iter().map(|w| w + 1.0).collect();
        let hit = (0..1000).any(|_| popularity_negatives(&smoothed, &exclude, 2, &mut rng).contains(&0));
        assert!(hit);
    }

    #[test]
    fn proportional_single_draw() {
        let weights = vec![90.0, 10.0];
        let exclude = vec![false; 2];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let trials = 10_000;
        let zeros = (0..trials)
            .filter(|_| popularity_negatives(&weights, &exclude, 1, &mut rng) == vec![0])
            .count();
        let frac = zeros as f64 / trials as f64;
        // Binomial sd = sqrt(0.9 * 0.1 / 1e4) = 0.003.
        assert!((frac - 0.9).abs() < 0.012, "{frac}");
    }

    #[test]
    fn short_supply_returns_all_eligible() {
        let weights = vec![1.0; 10];
        let mut exclude = vec![false; 10];
        exclude[..4].iter_mut().for_each(|e| *e = true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let neg = popularity_negatives(&weights, &exclude, 100, &mut rng);
        assert_eq!(neg, vec![4, 5, 6, 7, 8, 9]);
    }
}

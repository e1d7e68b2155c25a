//! Non-target distillation with a curriculum mask that starts from a few
//! frequent classes and widens to every non-target class.

use rand::seq::index::sample_weighted;
use rand::seq::SliceRandom;
use rand::Rng;

use super::probs::MaskVector;
use super::target::LOG_FLOOR;
use crate::error::{Error, Result};

/// Number of masked non-target classes at progress `t`:
/// `min(n - 1, round((1 - t) * n))` before `tau1`, zero afterwards.
pub fn masked_nontarget_count(t: f64, tau1: f64, n_classes: usize) -> usize {
    if t >= tau1 || n_classes == 0 {
        return 0;
    }
    let raw = ((1.0 - t) * n_classes as f64).round().max(0.0) as usize;
    raw.min(n_classes - 1)
}

/// Draws the curriculum mask for one sample. The kept non-target set is
/// sampled without replacement with probability proportional to
/// `frequency + smoothing`; zero-weight classes only fill leftover slots.
pub fn curriculum_mask<R: Rng + ?Sized>(
    t: f64,
    tau1: f64,
    target: usize,
    frequencies: &[f64],
    smoothing: f64,
    rng: &mut R,
) -> MaskVector {
    let n = frequencies.len();
    let masked = masked_nontarget_count(t, tau1, n);
    if masked == 0 {
        return MaskVector::target_only(n, target);
    }
    let keep = n - 1 - masked;
    let candidates: Vec<usize> = (0..n).filter(|&i| i != target).collect();
    let weight = |j: usize| {
        let w = frequencies[candidates[j]] + smoothing;
        if w.is_finite() && w > 0.0 {
            w
        } else {
            0.0
        }
    };

    let mut kept: Vec<usize> = if keep == 0 {
        Vec::new()
    } else {
        sample_weighted(rng, candidates.len(), weight, keep)
            .map(|iv| iv.into_iter().map(|j| candidates[j]).collect())
            .unwrap_or_default()
    };
    if kept.len() < keep {
        let mut rest: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|c| !kept.contains(c))
            .collect();
        rest.shuffle(rng);
        kept.extend(rest.into_iter().take(keep - kept.len()));
    }

    let mut flags = vec![true; n];
    for k in kept {
        flags[k] = false;
    }
    MaskVector::from_flags(flags)
}

/// `beta * sum_i -q_teacher[i] * log q_student[i]` over the shared support.
/// Entries where exactly one distribution is zero are a support mismatch.
pub fn loss_nontarget(q_teacher: &[f64], q_student: &[f64], beta: f64) -> Result<f64> {
    if q_teacher.len() != q_student.len() {
        return Err(Error::Shape(format!(
            "teacher has {} entries, student {}",
            q_teacher.len(),
            q_student.len()
        )));
    }
    let mut total = 0.0;
    for (i, (&qt, &qs)) in q_teacher.iter().zip(q_student).enumerate() {
        if (qt > 0.0) != (qs > 0.0) {
            return Err(Error::Numeric(format!(
                "support mismatch at class {i}: teacher {qt:e}, student {qs:e}"
            )));
        }
        if qt > 0.0 {
            total -= qt * qs.max(LOG_FLOOR).ln();
        }
    }
    Ok(beta * total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn count_schedule() {
        assert_eq!(masked_nontarget_count(0.8, 0.7, 10), 0);
        assert_eq!(masked_nontarget_count(0.7, 0.7, 10), 0);
        assert_eq!(masked_nontarget_count(0.4, 0.7, 10), 6);
        assert_eq!(masked_nontarget_count(0.0, 0.7, 10), 9);
    }

    #[test]
    fn late_mask_is_target_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = curriculum_mask(0.75, 0.7, 3, &[1.0; 8], 1.0, &mut rng);
        assert_eq!(m, MaskVector::target_only(8, 3));
    }

    #[test]
    fn zero_progress_masks_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = curriculum_mask(0.0, 0.7, 1, &[3.0; 6], 1.0, &mut rng);
        assert_eq!(m.kept_count(), 0);
        assert!(m.is_masked(1));
    }

    #[test]
    fn kept_set_follows_frequency() {
        // |I| = 10, t = 0.4: six masked non-targets, three kept.
        let freqs: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut inclusion = vec![0usize; 10];
        for _ in 0..20_000 {
            let m = curriculum_mask(0.4, 0.7, 0, &freqs, 1.0, &mut rng);
            assert!(m.is_masked(0));
            assert_eq!(m.masked_nontarget_count(0), 6);
            for k in m.kept() {
                inclusion[k] += 1;
            }
        }
        assert_eq!(inclusion[0], 0);
        for w in inclusion[1..].windows(2) {
            assert!(w[0] <= w[1], "{inclusion:?}");
        }
    }

    #[test]
    fn zero_weights_fill_when_needed() {
        let freqs = [5.0, 0.0, 0.0, 0.0, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // t = 0.2 -> 4 masked of 5 -> clamp to 4 -> keep 0; t=0.0 also 0.
        // t = 0.4 -> round(3) = 3 masked -> keep 1.
        let m = curriculum_mask(0.4, 0.7, 0, &freqs, 0.0, &mut rng);
        assert_eq!(m.kept().collect::<Vec<_>>(), vec![4]);
        // t = 0.6 -> round(2) = 2 masked -> keep 2, only one positive weight.
        let m = curriculum_mask(0.6, 0.7, 0, &freqs, 0.0, &mut rng);
        assert_eq!(m.kept_count(), 2);
        assert!(!m.is_masked(4));
    }

    #[test]
    fn nontarget_loss_values() {
        let q = [0.0, 0.25, 0.75];
        let h = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((loss_nontarget(&q, &q, 2.0).unwrap() - 2.0 * h).abs() < 1e-14);
        assert_eq!(loss_nontarget(&q, &q, 0.0).unwrap(), 0.0);
        let v = loss_nontarget(&[0.0, 0.7, 0.3], &[0.0, 0.5, 0.5], 1.5).unwrap();
        let expect = 1.5 * (-0.7 * 0.5f64.ln() - 0.3 * 0.5f64.ln());
        assert!((v - expect).abs() < 1e-14);
    }

    #[test]
    fn nontarget_support_mismatch() {
        assert!(loss_nontarget(&[0.0, 0.5, 0.5], &[0.5, 0.5, 0.0], 1.0).is_err());
        assert!(loss_nontarget(&[0.5, 0.5], &[1.0], 1.0).is_err());
    }
}

//! Target-side distillation: the confidence-weighted simple loss, the
//! difficulty-weighted loss, batch-level teacher truncation and the phase
//! gate that switches between the two losses as training progresses.

use serde::{Deserialize, Serialize};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

fn floored_ln(p: f64) -> f64 {
    if p < LOG_FLOOR {
        log::warn!("probability {p:e} clamped to {LOG_FLOOR:e} before log");
        LOG_FLOOR.ln()
    } else {
        p.ln()
    }
}

/// `-alpha * p_teacher * log(p_student)`.
pub fn loss_simple_target(p_teacher: f64, p_student: f64, alpha: f64) -> f64 {
    if p_teacher == 0.0 {
        return 0.0;
    }
    -alpha * p_teacher * floored_ln(p_student)
}

/// `-(1 - p_teacher)^gamma * log(p_student)`.
pub fn loss_difficult_target(p_teacher: f64, p_student: f64, gamma: f64) -> f64 {
    let weight = difficulty_weight(p_teacher, gamma);
    if weight == 0.0 {
        return 0.0;
    }
    -weight * floored_ln(p_student)
}

pub fn difficulty_weight(p_teacher: f64, gamma: f64) -> f64 {
    (1.0 - p_teacher).max(0.0).powf(gamma)
}

/// 0-based ascending rank of every entry; ties go to the lower index.
pub fn ascending_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; values.len()];
    for (rank, idx) in order.into_iter().enumerate() {
        ranks[idx] = rank;
    }
    ranks
}

/// Samples whose target probability ranks below `epsilon * |B|` for every
/// peer. `per_peer[k][m]` is peer `k`'s target probability for sample `m`.
pub fn truncation_flags(per_peer: &[Vec<f64>], epsilon: f64) -> Vec<bool> {
    let Some(first) = per_peer.first() else {
        return Vec::new();
    };
    let batch = first.len();
    let cutoff = epsilon * batch as f64;
    let mut flags = vec![true; batch];
    for probs in per_peer {
        debug_assert_eq!(probs.len(), batch);
        for (flag, rank) in flags.iter_mut().zip(ascending_ranks(probs)) {
            *flag &= (rank as f64) < cutoff;
        }
    }
    flags
}

/// Teacher target probabilities with truncated samples reset to 1.
pub fn truncate_teacher(per_peer: &[Vec<f64>], epsilon: f64) -> Vec<Vec<f64>> {
    let flags = truncation_flags(per_peer, epsilon);
    per_peer
        .iter()
        .map(|probs| {
            probs
                .iter()
                .zip(&flags)
                .map(|(p, truncated)| if *truncated { 1.0 } else { *p })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Simple,
    Difficult,
}

/// Which regime the progress value falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseBand {
    Early,
    Mixed,
    Late,
}

pub fn phase_band(t: f64, tau0: f64, tau1: f64) -> PhaseBand {
    if t < tau0 {
        PhaseBand::Early
    } else if t > tau1 {
        PhaseBand::Late
    } else {
        PhaseBand::Mixed
    }
}

/// Simple before `tau0`, difficult after `tau1`; in between the simple
/// loss is chosen iff `t < draw`, so `P(simple) = 1 - t`.
pub fn phase_gate(t: f64, tau0: f64, tau1: f64, draw: f64) -> Phase {
    match phase_band(t, tau0, tau1) {
        PhaseBand::Early => Phase::Simple,
        PhaseBand::Late => Phase::Difficult,
        PhaseBand::Mixed => {
            if t < draw {
                Phase::Simple
            } else {
                Phase::Difficult
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn simple_loss_values() {
        assert_eq!(loss_simple_target(1.0, 1.0, 1.0), 0.0);
        assert_eq!(loss_simple_target(0.0, 0.3, 4.0), 0.0);
        let v = loss_simple_target(0.8, 0.5, 2.0);
        assert!((v - 1.6 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn simple_loss_clamps_zero_probability() {
        let v = loss_simple_target(1.0, 0.0, 1.0);
        assert!((v + LOG_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn difficult_loss_values() {
        assert_eq!(loss_difficult_target(1.0, 0.2, 1.5), 0.0);
        let plain = loss_difficult_target(0.4, 0.3, 0.0);
        assert!((plain + 0.3f64.ln()).abs() < 1e-14);
        let v = loss_difficult_target(0.5, 0.25, 2.0);
        assert!((v + 0.25 * 0.25f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn difficult_loss_monotone() {
        let gamma = 1.3;
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let p = i as f64 / 100.0;
            let v = loss_difficult_target(0.3, p, gamma);
            assert!(v < prev);
            prev = v;
        }
        let mut prev_w = f64::INFINITY;
        for i in 0..100 {
            let w = difficulty_weight(i as f64 / 100.0, gamma);
            assert!(w < prev_w);
            prev_w = w;
        }
    }

    #[test]
    fn ranks_break_ties_by_index() {
        assert_eq!(ascending_ranks(&[0.5, 0.1, 0.5, 0.0]), vec![2, 1, 3, 0]);
    }

    #[test]
    fn zero_epsilon_truncates_nothing() {
        let peers = vec![vec![0.1, 0.2, 0.3], vec![0.3, 0.2, 0.1]];
        assert_eq!(truncation_flags(&peers, 0.0), vec![false; 3]);
    }

    #[test]
    fn truncation_requires_every_peer() {
        // Sample 0 is lowest for peer 0 but highest for peer 1.
        let peers = vec![vec![0.01, 0.5, 0.6, 0.7], vec![0.9, 0.05, 0.6, 0.7]];
        let flags = truncation_flags(&peers, 0.25);
        assert_eq!(flags, vec![false, false, false, false]);
        let peers = vec![vec![0.01, 0.5, 0.6, 0.7], vec![0.02, 0.5, 0.6, 0.7]];
        let adjusted = truncate_teacher(&peers, 0.25);
        assert_eq!(adjusted[0], vec![1.0, 0.5, 0.6, 0.7]);
        assert_eq!(adjusted[1], vec![1.0, 0.5, 0.6, 0.7]);
    }

    #[test]
    fn phase_gate_bands() {
        assert_eq!(phase_gate(0.1, 0.2, 0.7, 0.0), Phase::Simple);
        assert_eq!(phase_gate(0.1, 0.2, 0.7, 0.99), Phase::Simple);
        assert_eq!(phase_gate(0.9, 0.2, 0.7, 0.99), Phase::Difficult);
        assert_eq!(phase_gate(0.5, 0.2, 0.7, 0.6), Phase::Simple);
        assert_eq!(phase_gate(0.5, 0.2, 0.7, 0.4), Phase::Difficult);
        // Both thresholds are inclusive of the mixed band.
        assert_eq!(phase_band(0.2, 0.2, 0.7), PhaseBand::Mixed);
        assert_eq!(phase_band(0.7, 0.2, 0.7), PhaseBand::Mixed);
    }

    #[test]
    fn phase_gate_simple_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let simple = (0..n)
            .filter(|_| phase_gate(0.5, 0.2, 0.7, rng.random::<f64>()) == Phase::Simple)
            .count();
        let frac = simple as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }
}

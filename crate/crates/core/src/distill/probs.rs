//! Probability decompositions of a logit vector: the full softmax, the
//! binary target/rest split, and the renormalized non-target distribution
//! over the entries a curriculum mask leaves visible.

use crate::error::{Error, Result};

/// Logit offset applied to masked entries in the literal masked softmax.
pub const MASK_OFFSET: f64 = 1000.0;

fn check_finite(z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::Numeric("empty logit vector".into()));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {} at {i}", z[i])));
    }
    Ok(())
}

fn max_of(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(f64::NEG_INFINITY, f64::max)
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    check_finite(z)?;
    let m = max_of(z.iter().copied());
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `log softmax(z)` without forming probabilities first.
pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    check_finite(z)?;
    let lse = log_sum_exp(z.iter().copied());
    Ok(z.iter().map(|v| v - lse).collect())
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = max_of(values.clone());
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Binary decomposition of a distribution into the ground-truth mass and
/// everything else.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSplit {
    pub target: f64,
    pub rest: f64,
}

pub fn decouple_target(z: &[f64], target: usize) -> Result<TargetSplit> {
    if target >= z.len() {
        return Err(Error::Index {
            index: target,
            len: z.len(),
        });
    }
    let (log_target, log_rest) = decouple_target_log(z, target)?;
    Ok(TargetSplit {
        target: log_target.exp(),
        rest: log_rest.exp(),
    })
}

/// Log-space `(log p_target, log p_rest)`. `log p_rest` is `-inf` when the
/// vector has a single entry.
pub(crate) fn decouple_target_log(z: &[f64], target: usize) -> Result<(f64, f64)> {
    check_finite(z)?;
    let lse = log_sum_exp(z.iter().copied());
    let rest = log_sum_exp(
        z.iter()
            .enumerate()
            .filter(move |(i, _)| *i != target)
            .map(|(_, v)| *v),
    );
    Ok((z[target] - lse, rest - lse))
}

/// Per-class mask: `true` marks an entry excluded from the non-target
/// distribution. The target entry is always masked.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskVector {
    masked: Vec<bool>,
}

impl MaskVector {
    /// Only the target masked: the conventional non-target distribution.
    pub fn target_only(n_classes: usize, target: usize) -> Self {
        let mut masked = vec![false; n_classes];
        if target < n_classes {
            masked[target] = true;
        }
        Self { masked }
    }

    /// Target plus the given extra ids masked.
    pub fn with_masked(n_classes: usize, target: usize, extra: impl IntoIterator<Item = usize>) -> Self {
        let mut mask = Self::target_only(n_classes, target);
        for i in extra {
            if i < n_classes {
                mask.masked[i] = true;
            }
        }
        mask
    }

    pub fn from_flags(masked: Vec<bool>) -> Self {
        Self { masked }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked[i]
    }

    pub fn flags(&self) -> &[bool] {
        &self.masked
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|m| **m).count()
    }

    /// Masked entries other than `target`.
    pub fn masked_nontarget_count(&self, target: usize) -> usize {
        self.masked
            .iter()
            .enumerate()
            .filter(|(i, m)| **m && *i != target)
            .count()
    }

    /// Indices left visible.
    pub fn kept(&self) -> impl Iterator<Item = usize> + '_ {
        self.masked
            .iter()
            .enumerate()
            .filter(|(_, m)| !**m)
            .map(|(i, _)| i)
    }

    pub fn kept_count(&self) -> usize {
        self.masked.len() - self.masked_count()
    }
}

fn check_mask(z: &[f64], target: usize, mask: &MaskVector) -> Result<()> {
    if mask.len() != z.len() {
        return Err(Error::Shape(format!(
            "mask length {} vs logits {}",
            mask.len(),
            z.len()
        )));
    }
    if target >= z.len() {
        return Err(Error::Index {
            index: target,
            len: z.len(),
        });
    }
    if !mask.is_masked(target) {
        return Err(Error::Numeric("mask must cover the target entry".into()));
    }
    if mask.kept_count() == 0 {
        return Err(Error::Numeric(
            "every non-target entry is masked; non-target distribution is empty".into(),
        ));
    }
    Ok(())
}

/// Non-target distribution under a mask: softmax renormalized over the
/// unmasked entries, exactly zero elsewhere. This is the limit of
/// [`masked_softmax_offset`] as the offset grows, and stays normalized for
/// logits of any magnitude.
pub fn nontarget_distribution(z: &[f64], target: usize, mask: &MaskVector) -> Result<Vec<f64>> {
    check_finite(z)?;
    check_mask(z, target, mask)?;
    let m = max_of(mask.kept().map(|i| z[i]));
    let mut q = vec![0.0; z.len()];
    let mut sum = 0.0;
    for i in mask.kept() {
        let e = (z[i] - m).exp();
        q[i] = e;
        sum += e;
    }
    for v in q.iter_mut() {
        *v /= sum;
    }
    Ok(q)
}

/// Log of [`nontarget_distribution`] on kept entries; masked entries are
/// `-inf`.
pub(crate) fn nontarget_log_distribution(
    z: &[f64],
    target: usize,
    mask: &MaskVector,
) -> Result<Vec<f64>> {
    check_finite(z)?;
    check_mask(z, target, mask)?;
    let kept: Vec<f64> = mask.kept().map(|i| z[i]).collect();
    let lse = log_sum_exp(kept.iter().copied());
    Ok((0..z.len())
        .map(|i| {
            if mask.is_masked(i) {
                f64::NEG_INFINITY
            } else {
                z[i] - lse
            }
        })
        .collect())
}

/// Literal `softmax(z - 1000 * c)`. Agrees with [`nontarget_distribution`]
/// only while the logit spread stays well below the offset.
pub fn masked_softmax_offset(z: &[f64], mask: &MaskVector) -> Result<Vec<f64>> {
    if mask.len() != z.len() {
        return Err(Error::Shape(format!(
            "mask length {} vs logits {}",
            mask.len(),
            z.len()
        )));
    }
    let shifted: Vec<f64> = z
        .iter()
        .zip(mask.flags())
        .map(|(v, m)| if *m { v - MASK_OFFSET } else { *v })
        .collect();
    softmax(&shifted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_uniform_pair() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!(close(p[0], 1.0, 1e-12));
        assert!(p[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_exponentials() {
        // Small logits: direct exp/sum has no overflow risk and serves as
        // the reference.
        let z = [1.0f64, 2.0, 3.0];
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let p = softmax(&z).unwrap();
        for (i, v) in z.iter().enumerate() {
            assert!(close(p[i], v.exp() / denom, 1e-15));
        }
        assert!(close(p.iter().sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(softmax(&[0.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn decouple_uniform() {
        let s = decouple_target(&[0.0; 4], 2).unwrap();
        assert!(close(s.target, 0.25, 1e-15));
        assert!(close(s.rest, 0.75, 1e-15));
    }

    #[test]
    fn decouple_dominant_target() {
        let s = decouple_target(&[800.0, 0.0, -3.0], 0).unwrap();
        assert!(s.target > 1.0 - 1e-6);
    }

    #[test]
    fn decouple_reference_value() {
        let e = [1f64.exp(), 2f64.exp(), 3f64.exp()];
        let s = decouple_target(&[1.0, 2.0, 3.0], 0).unwrap();
        assert!(close(s.target, e[0] / (e[0] + e[1] + e[2]), 1e-15));
        assert!(close(s.rest, (e[1] + e[2]) / (e[0] + e[1] + e[2]), 1e-15));
    }

    #[test]
    fn decouple_bad_index() {
        assert!(matches!(
            decouple_target(&[0.0, 1.0], 2),
            Err(Error::Index { index: 2, len: 2 })
        ));
    }

    #[test]
    fn nontarget_uniform_without_curriculum() {
        let q = nontarget_distribution(&[0.0; 4], 0, &MaskVector::target_only(4, 0)).unwrap();
        assert_eq!(q[0], 0.0);
        for v in &q[1..] {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn nontarget_single_survivor_gets_all_mass() {
        let mask = MaskVector::with_masked(5, 1, [0, 2, 4]);
        let q = nontarget_distribution(&[0.3, -2.0, 5.0, 1.0, 9.0], 1, &mask).unwrap();
        assert_eq!(q, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn nontarget_reduces_to_softmax_over_survivors() {
        let mask = MaskVector::with_masked(4, 1, [3]);
        let q = nontarget_distribution(&[1.0, 2.0, 3.0, 4.0], 1, &mask).unwrap();
        let reduced = softmax(&[1.0, 3.0]).unwrap();
        assert!(close(q[0], reduced[0], 1e-15));
        assert!(close(q[2], reduced[1], 1e-15));
        assert_eq!(q[1], 0.0);
        assert_eq!(q[3], 0.0);
    }

    #[test]
    fn nontarget_all_masked_is_degenerate() {
        let mask = MaskVector::with_masked(3, 0, [1, 2]);
        assert!(nontarget_distribution(&[0.0; 3], 0, &mask).is_err());
    }

    #[test]
    fn nontarget_requires_target_masked() {
        let mask = MaskVector::from_flags(vec![false, true, false]);
        assert!(nontarget_distribution(&[0.0; 3], 0, &mask).is_err());
    }

    #[test]
    fn offset_form_matches_exact_form_for_moderate_logits() {
        let z = [0.4, -1.2, 2.5, 0.0, 3.1, -0.7];
        let mask = MaskVector::with_masked(6, 2, [4]);
        let exact = nontarget_distribution(&z, 2, &mask).unwrap();
        let offset = masked_softmax_offset(&z, &mask).unwrap();
        for (a, b) in exact.iter().zip(&offset) {
            assert!(close(*a, *b, 1e-15));
        }
    }
}

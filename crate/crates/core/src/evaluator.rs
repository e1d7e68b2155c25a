//! Sampled ranking evaluation: each held-out target is scored against its
//! fixed popularity negatives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoders::{Encoder, SequenceBatch};
use crate::error::{Error, Result};
use crate::event_data::EvalPair;

pub const DEFAULT_CUTOFFS: [usize; 2] = [5, 10];

/// 1-based rank of `scores[target]`; every other candidate scoring at
/// least as high ranks ahead of it.
pub fn rank_of_target(scores: &[f64], target: usize) -> Result<usize> {
    if target >= scores.len() {
        return Err(Error::Index {
            index: target,
            len: scores.len(),
        });
    }
    let s = scores[target];
    if !s.is_finite() || scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite candidate score".into()));
    }
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| i != target && v >= s)
        .count();
    Ok(1 + ahead)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub count: usize,
}

impl RankingMetrics {
    pub fn hr_at(&self, n: usize) -> f64 {
        self.hr.get(&n).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, n: usize) -> f64 {
        self.ndcg.get(&n).copied().unwrap_or(f64::NAN)
    }

    pub fn summary(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        for (n, v) in &self.hr {
            parts.push(format!("HR@{n}={v:.4}"));
        }
        for (n, v) in &self.ndcg {
            parts.push(format!("NDCG@{n}={v:.4}"));
        }
        parts.push(format!("MRR={:.4}", self.mrr));
        parts.push(format!("n={}", self.count));
        parts.join(" ")
    }
}

pub fn metrics_from_ranks(ranks: &[usize], cutoffs: &[usize]) -> Result<RankingMetrics> {
    if ranks.is_empty() {
        return Err(Error::Data("no ranks to aggregate".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Data("ranks are 1-based".into()));
    }
    let n = ranks.len() as f64;
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &c in cutoffs {
        let hits = ranks.iter().filter(|&&r| r <= c).count() as f64;
        let gain: f64 = ranks
            .iter()
            .filter(|&&r| r <= c)
            .map(|&r| 1.0 / ((r + 1) as f64).log2())
            .sum();
        hr.insert(c, hits / n);
        ndcg.insert(c, gain / n);
    }
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    Ok(RankingMetrics {
        hr,
        ndcg,
        mrr,
        count: ranks.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingMode {
    /// Target against its sampled negatives.
    #[default]
    Sampled,
    /// Target against every class.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub mode: RankingMode,
    pub cutoffs: Vec<usize>,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: RankingMode::Sampled,
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            batch_size: 256,
        }
    }
}

/// Candidate list with the target first.
fn candidates(pair: &EvalPair, mode: RankingMode, n_classes: usize) -> Result<Vec<usize>> {
    let target = pair.target as usize;
    match mode {
        RankingMode::Sampled => {
            if pair.negatives.is_empty() {
                return Err(Error::Data(format!(
                    "spot {} has no negatives for its held-out target",
                    pair.spot
                )));
            }
            let mut c = Vec::with_capacity(pair.negatives.len() + 1);
            c.push(target);
            for &n in &pair.negatives {
                if n as usize == target {
                    return Err(Error::Data(format!(
                        "spot {} lists its target among the negatives",
                        pair.spot
                    )));
                }
                c.push(n as usize);
            }
            Ok(c)
        }
        RankingMode::Full => {
            let mut c = vec![target];
            c.extend((0..n_classes).filter(|&i| i != target));
            Ok(c)
        }
    }
}

/// Ranks of every pair's target, in input order.
pub fn rank_pairs(encoder: &Encoder, pairs: &[EvalPair], opts: &EvalOptions) -> Result<Vec<usize>> {
    let cfg = encoder.config();
    let mut ranks = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(opts.batch_size.max(1)) {
        let histories: Vec<&[u32]> = chunk.iter().map(|p| p.history.as_slice()).collect();
        let batch = SequenceBatch::from_histories(&histories, cfg)?;
        let logits = encoder.logits(&batch)?;
        for (row, pair) in chunk.iter().enumerate() {
            let cand = candidates(pair, opts.mode, cfg.n_classes)?;
            let scores = cand
                .iter()
                .map(|&c| {
                    logits.get((row, c)).copied().ok_or(Error::Index {
                        index: c,
                        len: cfg.n_classes,
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            ranks.push(rank_of_target(&scores, 0)?);
        }
    }
    Ok(ranks)
}

pub fn evaluate(encoder: &Encoder, pairs: &[EvalPair], opts: &EvalOptions) -> Result<RankingMetrics> {
    let ranks = rank_pairs(encoder, pairs, opts)?;
    metrics_from_ranks(&ranks, &opts.cutoffs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset_id: String,
    pub checkpoint_id: String,
    pub peer: usize,
    pub split: String,
    pub mode: RankingMode,
    pub metrics: RankingMetrics,
}

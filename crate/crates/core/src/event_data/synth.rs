//! Synthetic spots whose events come from a few latent intents that switch
//! over time. Intents are drawn from a shared pool so that spots overlap in
//! some of their behavior and differ in the rest.

use chrono::{Duration, NaiveDate};
use rand::seq::index::sample;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use super::records::EventRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_spots: usize,
    pub n_classes: usize,
    /// Probability of moving to a different intent at each step.
    pub switch_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Size of the shared intent pool; 0 picks `max(4, n_classes / 4)`.
    pub intent_pool: usize,
    /// Classes carrying mass in one intent; 0 picks `max(2, n_classes / 6)`.
    pub intent_support: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_spots: 200,
            n_classes: 40,
            switch_prob: 0.3,
            min_len: 20,
            max_len: 60,
            intent_pool: 0,
            intent_support: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 4 {
            return bad(format!("n_classes must be at least 4, got {}", self.n_classes));
        }
        if self.n_classes > 8 * 1000 {
            return bad("n_classes too large".into());
        }
        if !(0.0..=1.0).contains(&self.switch_prob) {
            return bad(format!("switch_prob {} outside [0, 1]", self.switch_prob));
        }
        if self.n_spots == 0 {
            return bad("n_spots must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!(
                "sequence length range [{}, {}] is invalid",
                self.min_len, self.max_len
            ));
        }
        if self.intent_support > self.n_classes {
            return bad("intent_support exceeds n_classes".into());
        }
        if self.intent_pool != 0 && self.intent_pool < 2 {
            return bad("intent_pool must be at least 2".into());
        }
        Ok(())
    }

    fn pool_size(&self) -> usize {
        if self.intent_pool == 0 {
            (self.n_classes / 4).max(4)
        } else {
            self.intent_pool
        }
    }

    fn support_size(&self) -> usize {
        if self.intent_support == 0 {
            (self.n_classes / 6).max(2)
        } else {
            self.intent_support
        }
    }
}

/// A sparse distribution over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub classes: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub records: Vec<EventRecord>,
    pub pool: Vec<Intent>,
    /// Pool indices available to each spot.
    pub spot_intents: Vec<Vec<usize>>,
    /// Active pool index at every step of every spot.
    pub trace: Vec<Vec<usize>>,
    /// Emitted synthetic class per step.
    pub classes: Vec<Vec<usize>>,
}

/// Slot and category name for a synthetic class id.
pub fn class_identity(class: usize) -> (u8, String) {
    ((class % 8) as u8, format!("CAT{:03}", class / 8))
}

pub fn synth_generate<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<SyntheticData> {
    cfg.validate()?;
    let support = cfg.support_size();
    let pool: Vec<Intent> = (0..cfg.pool_size())
        .map(|_| {
            let classes = sample(rng, cfg.n_classes, support).into_vec();
            // Geometric decay gives each intent a few dominant classes.
            let weights = (0..support).map(|r| 0.6f64.powi(r as i32)).collect();
            Intent { classes, weights }
        })
        .collect();
    let samplers: Vec<WeightedIndex<f64>> = pool
        .iter()
        .map(|i| WeightedIndex::new(&i.weights).expect("positive weights"))
        .collect();

    let base = NaiveDate::from_ymd_opt(2020, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid base date");
    let per_spot = cfg.pool_size().min(4);

    let mut out = SyntheticData {
        records: Vec::new(),
        pool: pool.clone(),
        spot_intents: Vec::with_capacity(cfg.n_spots),
        trace: Vec::with_capacity(cfg.n_spots),
        classes: Vec::with_capacity(cfg.n_spots),
    };
    for spot in 0..cfg.n_spots {
        let k = rng.random_range(2..=per_spot);
        let intents = sample(rng, pool.len(), k).into_vec();
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut current = rng.random_range(0..k);
        let mut trace = Vec::with_capacity(len);
        let mut emitted = Vec::with_capacity(len);
        for step in 0..len {
            if step > 0 && rng.random::<f64>() < cfg.switch_prob {
                let shift = rng.random_range(1..k);
                current = (current + shift) % k;
            }
            let intent = intents[current];
            let class = pool[intent].classes[samplers[intent].sample(rng)];
            trace.push(intent);
            emitted.push(class);

            let (slot, category) = class_identity(class);
            let hour = slot as i64 * 3 + rng.random_range(0..3);
            let minute = rng.random_range(0..60);
            let timestamp = base
                + Duration::days(step as i64)
                + Duration::hours(hour)
                + Duration::minutes(minute);
            out.records.push(EventRecord {
                precinct: format!("P{:02}", spot % 17),
                premises: format!("SPOT{spot:05}"),
                timestamp,
                category,
            });
        }
        out.spot_intents.push(intents);
        out.trace.push(trace);
        out.classes.push(emitted);
    }
    Ok(out)
}

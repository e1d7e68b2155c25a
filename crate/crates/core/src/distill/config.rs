use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Switches that remove parts of the distillation objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Keep only the simple target loss for the whole run.
    pub no_ctc: bool,
    /// Drop target distillation entirely.
    pub no_tc: bool,
    /// Use the conventional non-target distribution (only the target masked).
    pub no_cnc: bool,
    /// Drop non-target distillation entirely.
    pub no_nc: bool,
}

impl Ablation {
    pub const VARIANTS: [(&'static str, Ablation); 5] = [
        ("full", Ablation { no_ctc: false, no_tc: false, no_cnc: false, no_nc: false }),
        ("no_ctc", Ablation { no_ctc: true, no_tc: false, no_cnc: false, no_nc: false }),
        ("no_tc", Ablation { no_ctc: false, no_tc: true, no_cnc: false, no_nc: false }),
        ("no_cnc", Ablation { no_ctc: false, no_tc: false, no_cnc: true, no_nc: false }),
        ("no_nc", Ablation { no_ctc: false, no_tc: false, no_cnc: false, no_nc: true }),
    ];

    /// Neither target nor non-target distillation remains.
    pub fn distillation_off(&self) -> bool {
        self.no_tc && self.no_nc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Truncation proportion of the batch.
    pub epsilon: f64,
    pub tau0: f64,
    pub tau1: f64,
    /// Softening temperature for distillation terms; 1 leaves logits as is.
    pub temperature: f64,
    /// Additive smoothing on class frequencies when sampling the kept
    /// non-target set.
    pub mask_smoothing: f64,
    /// Add the rest-mass term `-p~_rest log p_rest` to the simple target
    /// loss, which turns the simple phase into the full decoupled target
    /// loss.
    pub rest_term: bool,
    pub ablation: Ablation,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 1.0,
            gamma: 1.0,
            epsilon: 0.01,
            tau0: 0.2,
            tau1: 0.7,
            temperature: 1.0,
            mask_smoothing: 1.0,
            rest_term: false,
            ablation: Ablation::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(0.0 < self.tau0 && self.tau0 < self.tau1 && self.tau1 < 1.0) {
            return bad("thresholds must satisfy 0 < tau0 < tau1 < 1");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.gamma >= 0.0) {
            return bad("alpha, beta and gamma must be non-negative");
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1)");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(self.mask_smoothing >= 0.0) {
            return bad("mask_smoothing must be non-negative");
        }
        Ok(())
    }
}

/// Training progress `t = epoch / total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub epoch: usize,
    pub total_epochs: usize,
}

impl CurriculumState {
    pub fn new(epoch: usize, total_epochs: usize) -> Self {
        Self {
            epoch,
            total_epochs,
        }
    }

    pub fn progress(&self) -> f64 {
        if self.total_epochs == 0 {
            return 1.0;
        }
        (self.epoch as f64 / self.total_epochs as f64).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = DistillConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.tau0, cfg.tau1, cfg.epsilon), (0.2, 0.7, 0.01));
        assert_eq!((cfg.alpha, cfg.gamma, cfg.beta), (5.0, 1.0, 1.0));
    }

    #[test]
    fn rejects_inverted_thresholds() {
        let cfg = DistillConfig {
            tau0: 0.7,
            tau1: 0.2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = DistillConfig {
            epsilon: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn progress_is_epoch_fraction() {
        assert_eq!(CurriculumState::new(20, 100).progress(), 0.2);
        assert_eq!(CurriculumState::new(0, 100).progress(), 0.0);
    }
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluator::EvalOptions;
use crate::event_data::{ColumnMapping, DatasetBundle, PrepareOptions, SynthConfig};
use crate::trainer::{AdamConfig, TrainerConfig};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub columns: ColumnMapping,
    pub prepare: PrepareOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub peers: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    pub clip_norm: f64,
    pub shared_init: bool,
    pub eval_peer: usize,
    pub validate_every: usize,
    pub keep_epoch_checkpoints: bool,
    pub history_capacity: usize,
    pub adam: AdamConfig,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainerConfig::default();
        Self {
            peers: t.peers.len(),
            total_epochs: t.total_epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            seed: t.seed,
            clip_norm: t.clip_norm,
            shared_init: t.shared_init,
            eval_peer: t.eval_peer,
            validate_every: t.validate_every,
            keep_epoch_checkpoints: t.keep_epoch_checkpoints,
            history_capacity: t.history_capacity,
            adam: t.adam,
        }
    }
}

/// Complete operator configuration. Every field has a default, so an empty
/// document is a valid configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    /// Encoder shared by all peers unless `peer_encoders` is non-empty.
    pub encoder: EncoderConfig,
    /// Explicit per-peer encoders; overrides `encoder` and `trainer.peers`.
    pub peer_encoders: Vec<EncoderConfig>,
    pub distill: DistillConfig,
    pub trainer: TrainerSection,
    pub eval: EvalOptions,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text)
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn trainer_config(&self, bundle: &DatasetBundle) -> Result<TrainerConfig> {
        let t = &self.trainer;
        let peers = if self.peer_encoders.is_empty() {
            if t.peers == 0 {
                return Err(Error::Config("trainer.peers must be positive".into()));
            }
            vec![self.encoder.clone(); t.peers]
        } else {
            self.peer_encoders.clone()
        };
        let mut cfg = TrainerConfig {
            total_epochs: t.total_epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            seed: t.seed,
            clip_norm: t.clip_norm,
            adam: t.adam,
            distill: self.distill.clone(),
            peers,
            shared_init: t.shared_init,
            eval_peer: t.eval_peer,
            validate_every: t.validate_every,
            keep_epoch_checkpoints: t.keep_epoch_checkpoints,
            history_capacity: t.history_capacity,
        };
        cfg.bind_to(bundle);
        cfg.validate()?;
        Ok(cfg)
    }
}

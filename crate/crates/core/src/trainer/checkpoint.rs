use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::{BestRecord, TrainerConfig};
use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::event_data::{read_json, write_json};

pub const RUN_STATE_FORMAT: &str = "eventdistill-run-state";
pub const RUN_STATE_VERSION: u32 = 1;
pub const STATE_FILE: &str = "state.json";

/// Everything besides peer parameters needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStateManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub dataset_id: String,
    pub config: TrainerConfig,
    /// Epochs completed so far.
    pub next_epoch: usize,
    pub step: u64,
    pub optimizers: Vec<AdamState>,
    pub best: Option<BestRecord>,
    pub peer_files: Vec<String>,
}

pub fn peer_file(k: usize) -> String {
    format!("peer{k}.json")
}

pub fn checkpoint_dir(run_dir: &Path, name: &str) -> PathBuf {
    run_dir.join("checkpoints").join(name)
}

/// Writes into a sibling staging directory, then swaps it into place.
pub(crate) fn save_checkpoint(
    dir: &Path,
    manifest: &RunStateManifest,
    peers: &[Encoder],
) -> Result<()> {
    let parent = dir
        .parent()
        .ok_or_else(|| Error::Config(format!("checkpoint path {} has no parent", dir.display())))?;
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = dir.with_extension("staging");
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    std::fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    for (k, peer) in peers.iter().enumerate() {
        peer.save(&staging.join(peer_file(k)))?;
    }
    write_json(&staging.join(STATE_FILE), manifest)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(RunStateManifest, Vec<Encoder>)> {
    let manifest: RunStateManifest = read_json(&dir.join(STATE_FILE))?;
    if manifest.format != RUN_STATE_FORMAT || manifest.version != RUN_STATE_VERSION {
        return Err(Error::Config(format!(
            "unsupported run state {} v{}",
            manifest.format, manifest.version
        )));
    }
    let peers = manifest
        .peer_files
        .iter()
        .map(|f| Encoder::load(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    if peers.len() != manifest.optimizers.len() {
        return Err(Error::Shape("peer and optimizer counts differ".into()));
    }
    for (p, o) in peers.iter().zip(&manifest.optimizers) {
        o.check_matches(p.params())?;
    }
    Ok((manifest, peers))
}

/// Loads only the peers of a checkpoint directory.
pub fn load_peers(dir: &Path) -> Result<Vec<Encoder>> {
    let manifest: RunStateManifest = read_json(&dir.join(STATE_FILE))?;
    manifest
        .peer_files
        .iter()
        .map(|f| Encoder::load(&dir.join(f)))
        .collect()
}

//! Mutual training of a group of peers under the curriculum distillation
//! objective: epoch loop, shared per-iteration curriculum draws, one
//! optimizer per peer, validation tracking and resumable checkpoints.

mod adam;
mod checkpoint;

use std::collections::VecDeque;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState, Moments};
pub use checkpoint::{
    checkpoint_dir, load_checkpoint, load_peers, peer_file, RunStateManifest, RUN_STATE_FORMAT,
    RUN_STATE_VERSION, STATE_FILE,
};

use crate::distill::{
    joint_loss, CurriculumDraw, CurriculumState, DistillConfig, PeerBreakdown, Phase,
};
use crate::encoders::{array_to_tensor, tensor_to_array, Encoder, EncoderConfig, Mode, SequenceBatch};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalOptions, RankingMetrics};
use crate::event_data::{write_json, DatasetBundle, TrainSample};
use crate::seeding::{rng_for, tag};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const VAL_LOG: &str = "val_metrics.jsonl";
/// Validation cutoff used to pick the best checkpoint.
pub const SELECTION_CUTOFF: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub total_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    /// Global L2 norm cap applied to each peer's gradient.
    pub clip_norm: f64,
    pub adam: AdamConfig,
    pub distill: DistillConfig,
    /// One encoder per peer; the number of entries is the group size.
    pub peers: Vec<EncoderConfig>,
    /// Start every peer from the same parameter draw.
    pub shared_init: bool,
    pub eval_peer: usize,
    /// Validate every this many epochs; 0 turns validation off.
    pub validate_every: usize,
    pub keep_epoch_checkpoints: bool,
    pub history_capacity: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            total_epochs: 100,
            batch_size: 256,
            base_lr: 1e-3,
            seed: 0,
            clip_norm: 5.0,
            adam: AdamConfig::default(),
            distill: DistillConfig::default(),
            peers: vec![EncoderConfig::default(); 2],
            shared_init: false,
            eval_peer: 0,
            validate_every: 1,
            keep_epoch_checkpoints: false,
            history_capacity: 512,
        }
    }
}

impl TrainerConfig {
    pub fn peer_count(&self) -> usize {
        self.peers.len()
    }

    /// Copies the class count of `bundle` into every peer encoder.
    pub fn bind_to(&mut self, bundle: &DatasetBundle) {
        for p in &mut self.peers {
            p.n_classes = bundle.n_classes();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.total_epochs == 0 {
            return bad("total_epochs must be positive".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative".into());
        }
        if self.peers.is_empty() {
            return bad("at least one peer is required".into());
        }
        if self.peers.len() < 2 && !self.distill.ablation.distillation_off() {
            return bad("distillation needs at least two peers".into());
        }
        if self.eval_peer >= self.peers.len() {
            return bad(format!(
                "eval_peer {} out of range for {} peers",
                self.eval_peer,
                self.peers.len()
            ));
        }
        self.distill.validate()?;
        let n = self.peers[0].n_classes;
        for p in &self.peers {
            p.validate()?;
            if p.n_classes != n {
                return bad("peers disagree on the number of classes".into());
            }
        }
        Ok(())
    }
}

/// Independent histories and their next-event labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainBatch {
    pub histories: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
}

impl TrainBatch {
    pub fn from_samples(samples: &[&TrainSample]) -> Self {
        Self {
            histories: samples.iter().map(|s| s.input.clone()).collect(),
            labels: samples.iter().map(|s| s.target as usize).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub t: f64,
    pub phase: Phase,
    pub peers: Vec<PeerBreakdown>,
    pub lr: f64,
    pub draw_digest: u64,
    pub truncated: usize,
    pub grad_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub peers: Vec<RankingMetrics>,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub score: f64,
}

pub struct TrainRunState {
    pub curriculum: CurriculumState,
    pub peers: Vec<Encoder>,
    pub optimizers: Vec<AdamState>,
    pub step: u64,
    pub recent: VecDeque<StepRecord>,
    pub best: Option<BestRecord>,
    /// Where a failing batch is written before a numeric error is raised.
    pub dump_dir: Option<PathBuf>,
    capacity: usize,
}

impl TrainRunState {
    pub fn new(cfg: &TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let peers = cfg
            .peers
            .iter()
            .enumerate()
            .map(|(k, pc)| {
                let stream = if cfg.shared_init { 0 } else { k as u64 };
                Encoder::new(pc.clone(), &mut rng_for(cfg.seed, &[tag::INIT, stream]))
            })
            .collect::<Result<Vec<_>>>()?;
        let optimizers = peers.iter().map(|p| AdamState::new(p.params())).collect();
        Ok(Self {
            curriculum: CurriculumState::new(0, cfg.total_epochs),
            peers,
            optimizers,
            step: 0,
            recent: VecDeque::new(),
            best: None,
            dump_dir: None,
            capacity: cfg.history_capacity,
        })
    }

    fn remember(&mut self, rec: &StepRecord) {
        if self.capacity == 0 {
            return;
        }
        if self.recent.len() == self.capacity {
            self.recent.pop_front();
        }
        self.recent.push_back(rec.clone());
    }
}

/// Linear decay from `base_lr` at step 0 to zero after `total_steps`.
pub fn learning_rate(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    base_lr * (1.0 - step as f64 / total_steps as f64).max(0.0)
}

#[derive(Serialize)]
struct FailureDump<'a> {
    step: u64,
    epoch: usize,
    batch: &'a TrainBatch,
    logits: Vec<Vec<Vec<f64>>>,
    breakdown: &'a [PeerBreakdown],
}

/// One iteration: all peer logits, one shared curriculum draw, the joint
/// loss, and one optimizer update per peer. Dropout and curriculum streams
/// are derived from the seed and the global step.
pub fn training_step(
    batch: &TrainBatch,
    state: &mut TrainRunState,
    cfg: &TrainerConfig,
    frequencies: &[f64],
    lr: f64,
) -> Result<StepRecord> {
    if batch.len() < 2 {
        return Err(Error::Shape("a training batch needs at least two samples".into()));
    }
    let enc_cfg = state.peers[0].config().clone();
    let seq = SequenceBatch::from_histories(&batch.histories, &enc_cfg)?;
    let step = state.step;

    let mut outputs = Vec::with_capacity(state.peers.len());
    let mut arrays = Vec::with_capacity(state.peers.len());
    for (k, peer) in state.peers.iter().enumerate() {
        let seq_k = if peer.config().max_len == enc_cfg.max_len {
            seq.clone()
        } else {
            SequenceBatch::from_histories(&batch.histories, peer.config())?
        };
        let mut rng = rng_for(cfg.seed, &[tag::DROPOUT, step, k as u64]);
        let logits = peer.forward(&seq_k, &mut Mode::Train(&mut rng))?;
        arrays.push(tensor_to_array(&logits)?);
        outputs.push(logits);
    }

    let t = state.curriculum.progress();
    let mut crng = rng_for(cfg.seed, &[tag::CURRICULUM, step]);
    let draw = CurriculumDraw::sample(t, &cfg.distill, &batch.labels, frequencies, &mut crng);
    let logits_finite = arrays.iter().all(|a| a.iter().all(|v| v.is_finite()));
    let joint = if logits_finite {
        Some(joint_loss(&arrays, &batch.labels, &cfg.distill, &draw)?)
    } else {
        None
    };
    let finite = joint.as_ref().is_some_and(|j| {
        j.total.is_finite() && j.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    });
    if !finite {
        let breakdown = joint.as_ref().map(|j| j.per_peer.clone()).unwrap_or_default();
        let mut msg = format!(
            "non-finite loss at step {step} (epoch {}): {breakdown:?}",
            state.curriculum.epoch
        );
        if let Some(dir) = &state.dump_dir {
            let path = dir.join(format!("nonfinite_step{step}.json"));
            let dump = FailureDump {
                step,
                epoch: state.curriculum.epoch,
                batch,
                logits: arrays
                    .iter()
                    .map(|a| a.rows().into_iter().map(|r| r.to_vec()).collect())
                    .collect(),
                breakdown: &breakdown,
            };
            write_json(&path, &dump)?;
            msg.push_str(&format!("; batch written to {}", path.display()));
        }
        return Err(Error::Numeric(msg));
    }
    let joint = joint.expect("checked above");
    if joint.draw_digests.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Numeric(
            "peers consumed different curriculum decisions".into(),
        ));
    }

    let mut grad_norms = Vec::with_capacity(state.peers.len());
    for (k, logits) in outputs.iter().enumerate() {
        let surrogate = (logits * array_to_tensor(&joint.grads[k])?)?.sum_all()?;
        let store = surrogate.backward()?;
        let params = state.peers[k].params();
        let mut grads = adam::collect_grads(params, &store)?;
        grad_norms.push(adam::clip_global_norm(&mut grads, cfg.clip_norm));
        adam::adam_update(params, &mut state.optimizers[k], &grads, lr, &cfg.adam)?;
    }
    state.step += 1;

    let rec = StepRecord {
        epoch: state.curriculum.epoch,
        step,
        t,
        phase: draw.phase,
        peers: joint.per_peer,
        lr,
        draw_digest: joint.draw_digests.first().copied().unwrap_or(0),
        truncated: joint.truncated.iter().filter(|&&b| b).count(),
        grad_norms,
    };
    state.remember(&rec);
    Ok(rec)
}

pub fn select_peer_for_eval(peer_count: usize, index: Option<usize>) -> Result<usize> {
    let k = index.unwrap_or(0);
    if k >= peer_count {
        return Err(Error::Index {
            index: k,
            len: peer_count,
        });
    }
    Ok(k)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub run_dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop after this many completed epochs, leaving a resumable state.
    pub stop_after: Option<usize>,
}

pub struct TrainOutcome {
    pub peers: Vec<Encoder>,
    /// Peers at the best validation epoch, when validation ran.
    pub best_peers: Option<Vec<Encoder>>,
    pub best: Option<BestRecord>,
    pub history: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
    pub steps_per_epoch: usize,
    pub completed_epochs: usize,
    pub finished: bool,
}

impl TrainOutcome {
    /// Best-validation peers if available, otherwise the final ones.
    pub fn selected_peers(&self) -> &[Encoder] {
        self.best_peers.as_deref().unwrap_or(&self.peers)
    }
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples / batch_size + usize::from(samples % batch_size >= 2)
}

fn epoch_batches(n: usize, epoch: usize, cfg: &TrainerConfig) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
    order
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a log and keeps the records accepted by `keep`, rewriting the
/// file to match.
fn reload_log<T>(path: &Path, keep: impl Fn(&T) -> bool) -> Result<Vec<T>>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line)?;
        if keep(&rec) {
            kept.push(rec);
        }
    }
    let mut out = String::new();
    for rec in &kept {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(kept)
}

fn manifest_for(state: &TrainRunState, cfg: &TrainerConfig, dataset_id: &str) -> RunStateManifest {
    RunStateManifest {
        format: RUN_STATE_FORMAT.into(),
        version: RUN_STATE_VERSION,
        seed: cfg.seed,
        dataset_id: dataset_id.into(),
        config: cfg.clone(),
        next_epoch: state.curriculum.epoch,
        step: state.step,
        optimizers: state.optimizers.clone(),
        best: state.best,
        peer_files: (0..state.peers.len()).map(peer_file).collect(),
    }
}

fn resume_state(run_dir: &Path, cfg: &TrainerConfig, dataset_id: &str) -> Result<TrainRunState> {
    let (manifest, peers) = load_checkpoint(&checkpoint_dir(run_dir, "last"))?;
    if manifest.dataset_id != dataset_id {
        return Err(Error::Config(format!(
            "checkpoint was trained on dataset {}, not {dataset_id}",
            manifest.dataset_id
        )));
    }
    if &manifest.config != cfg {
        return Err(Error::Config(
            "resume requires the configuration the run started with".into(),
        ));
    }
    let mut state = TrainRunState::new(cfg)?;
    state.curriculum = CurriculumState::new(manifest.next_epoch, cfg.total_epochs);
    state.peers = peers;
    state.optimizers = manifest.optimizers;
    state.step = manifest.step;
    state.best = manifest.best;
    Ok(state)
}

fn validate_peers(
    peers: &[Encoder],
    bundle: &DatasetBundle,
    cfg: &TrainerConfig,
    epoch: usize,
) -> Result<ValidationRecord> {
    let opts = EvalOptions::default();
    let metrics = peers
        .iter()
        .map(|p| evaluate(p, &bundle.val, &opts))
        .collect::<Result<Vec<_>>>()?;
    let score = metrics[cfg.eval_peer].ndcg_at(SELECTION_CUTOFF);
    Ok(ValidationRecord {
        epoch,
        peers: metrics,
        score,
    })
}

fn duplicate_all(peers: &[Encoder]) -> Result<Vec<Encoder>> {
    peers.iter().map(Encoder::duplicate).collect()
}

pub fn run_training(
    bundle: &DatasetBundle,
    cfg: &TrainerConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.peers[0].n_classes != bundle.n_classes() {
        return Err(Error::Config(format!(
            "encoders expect {} classes, dataset has {}",
            cfg.peers[0].n_classes,
            bundle.n_classes()
        )));
    }
    if bundle.train.len() < 2 {
        return Err(Error::Data("fewer than two training samples".into()));
    }
    let dataset_id = bundle.manifest.dataset_id.as_str();
    let frequencies = bundle.frequencies();
    let per_epoch = steps_per_epoch(bundle.train.len(), cfg.batch_size);
    let total_steps = (per_epoch * cfg.total_epochs) as u64;
    let validating = cfg.validate_every > 0 && !bundle.val.is_empty();

    let run_dir = opts.run_dir.as_deref();
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (mut state, mut history, mut validation, mut best_peers) = match (run_dir, opts.resume) {
        (Some(dir), true) => {
            let state = resume_state(dir, cfg, dataset_id)?;
            let done = state.step;
            let epochs = state.curriculum.epoch;
            let history = reload_log::<StepRecord>(&dir.join(TRAIN_LOG), |r| r.step < done)?;
            let validation =
                reload_log::<ValidationRecord>(&dir.join(VAL_LOG), |r| r.epoch < epochs)?;
            let best_dir = checkpoint_dir(dir, "best");
            let best = if state.best.is_some() && best_dir.exists() {
                Some(load_peers(&best_dir)?)
            } else {
                None
            };
            (state, history, validation, best)
        }
        (None, true) => return Err(Error::Config("resume needs a run directory".into())),
        (dir, false) => {
            if let Some(dir) = dir {
                for log in [TRAIN_LOG, VAL_LOG] {
                    let p = dir.join(log);
                    if p.exists() {
                        std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                    }
                }
            }
            (TrainRunState::new(cfg)?, Vec::new(), Vec::new(), None)
        }
    };
    state.dump_dir = opts.run_dir.clone();

    let mut finished = state.curriculum.epoch >= cfg.total_epochs;
    while state.curriculum.epoch < cfg.total_epochs {
        let epoch = state.curriculum.epoch;
        for idx in epoch_batches(bundle.train.len(), epoch, cfg) {
            let samples: Vec<&TrainSample> = idx.iter().map(|&i| &bundle.train[i]).collect();
            let batch = TrainBatch::from_samples(&samples);
            let lr = learning_rate(cfg.base_lr, state.step, total_steps);
            let rec = training_step(&batch, &mut state, cfg, &frequencies, lr)?;
            if let Some(dir) = run_dir {
                append_line(&dir.join(TRAIN_LOG), &rec)?;
            }
            history.push(rec);
        }
        state.curriculum.epoch = epoch + 1;
        let last = epoch + 1 == cfg.total_epochs;

        if validating && ((epoch + 1) % cfg.validate_every == 0 || last) {
            let v = validate_peers(&state.peers, bundle, cfg, epoch)?;
            log::info!(
                "epoch {epoch}: validation NDCG@{SELECTION_CUTOFF} {:.4}",
                v.score
            );
            if let Some(dir) = run_dir {
                append_line(&dir.join(VAL_LOG), &v)?;
            }
            if state.best.is_none_or(|b| v.score > b.score) {
                state.best = Some(BestRecord {
                    epoch,
                    score: v.score,
                });
                best_peers = Some(duplicate_all(&state.peers)?);
                if let Some(dir) = run_dir {
                    let m = manifest_for(&state, cfg, dataset_id);
                    checkpoint::save_checkpoint(&checkpoint_dir(dir, "best"), &m, &state.peers)?;
                }
            }
            validation.push(v);
        }

        if let Some(dir) = run_dir {
            let m = manifest_for(&state, cfg, dataset_id);
            checkpoint::save_checkpoint(&checkpoint_dir(dir, "last"), &m, &state.peers)?;
            if cfg.keep_epoch_checkpoints {
                let name = format!("epoch_{:03}", epoch + 1);
                checkpoint::save_checkpoint(&checkpoint_dir(dir, &name), &m, &state.peers)?;
            }
            if last {
                checkpoint::save_checkpoint(&checkpoint_dir(dir, "final"), &m, &state.peers)?;
            }
        }
        if last {
            finished = true;
        }
        if opts.stop_after.is_some_and(|n| state.curriculum.epoch >= n) {
            break;
        }
    }

    Ok(TrainOutcome {
        completed_epochs: state.curriculum.epoch,
        peers: state.peers,
        best_peers,
        best: state.best,
        history,
        validation,
        steps_per_epoch: per_epoch,
        finished,
    })
}

#[cfg(test)]
mod tests;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::distill::Ablation;
use crate::encoders::Backbone;
use crate::event_data::{prepare_dataset, synth_generate, PrepareOptions, SynthConfig};

fn bundle(n_spots: usize) -> DatasetBundle {
    let cfg = SynthConfig {
        n_spots,
        n_classes: 12,
        min_len: 6,
        max_len: 10,
        ..Default::default()
    };
    let data = synth_generate(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let opts = PrepareOptions {
        max_len: 8,
        negatives: 5,
        ..Default::default()
    };
    prepare_dataset(&data.records, &opts).unwrap()
}

fn tiny_encoder(b: &DatasetBundle) -> EncoderConfig {
    EncoderConfig {
        backbone: Backbone::Transformer,
        num_layers: 1,
        num_heads: 2,
        embed_dim: 8,
        hidden_dim: 16,
        max_len: 8,
        n_classes: b.n_classes(),
        dropout: 0.1,
        kernel_size: 2,
    }
}

fn config(b: &DatasetBundle, peers: usize, epochs: usize) -> TrainerConfig {
    TrainerConfig {
        total_epochs: epochs,
        batch_size: 16,
        seed: 7,
        peers: vec![tiny_encoder(b); peers],
        validate_every: 1,
        ..Default::default()
    }
}

fn flat_params(e: &Encoder) -> Vec<f64> {
    e.params()
        .to_arrays()
        .unwrap()
        .into_iter()
        .flat_map(|a| a.data)
        .collect()
}

#[test]
fn config_validation() {
    let b = bundle(6);
    let mut cfg = config(&b, 2, 1);
    cfg.batch_size = 1;
    assert!(cfg.validate().is_err());
    let mut cfg = config(&b, 1, 1);
    assert!(cfg.validate().is_err());
    cfg.distill.ablation = Ablation {
        no_tc: true,
        no_nc: true,
        ..Default::default()
    };
    assert!(cfg.validate().is_ok());
    let mut cfg = config(&b, 2, 1);
    cfg.eval_peer = 2;
    assert!(cfg.validate().is_err());
}

#[test]
fn learning_rate_decays_linearly() {
    assert_eq!(learning_rate(1e-3, 0, 10), 1e-3);
    assert!((learning_rate(1e-3, 5, 10) - 5e-4).abs() < 1e-18);
    assert_eq!(learning_rate(1e-3, 10, 10), 0.0);
}

#[test]
fn one_epoch_history_matches_step_count() {
    let b = bundle(10);
    let cfg = config(&b, 2, 1);
    let out = run_training(&b, &cfg, &RunOptions::default()).unwrap();
    assert_eq!(out.steps_per_epoch, steps_per_epoch(b.train.len(), 16));
    assert_eq!(out.history.len(), out.steps_per_epoch);
    assert!(out.finished);
    assert!(out
        .history
        .iter()
        .all(|r| r.peers.iter().all(|p| p.total().is_finite())));
}

#[test]
fn identical_seeds_identical_runs() {
    let b = bundle(8);
    let cfg = config(&b, 2, 2);
    let a = run_training(&b, &cfg, &RunOptions::default()).unwrap();
    let c = run_training(&b, &cfg, &RunOptions::default()).unwrap();
    assert_eq!(a.history, c.history);
    for (p, q) in a.peers.iter().zip(&c.peers) {
        assert_eq!(flat_params(p), flat_params(q));
    }
}

#[test]
fn distillation_off_reduces_to_independent_training() {
    let b = bundle(8);
    let off = Ablation {
        no_tc: true,
        no_nc: true,
        ..Default::default()
    };
    let mut pair = config(&b, 2, 2);
    pair.distill.ablation = off;
    let mut single = config(&b, 1, 2);
    single.distill.ablation = off;
    let p = run_training(&b, &pair, &RunOptions::default()).unwrap();
    let s = run_training(&b, &single, &RunOptions::default()).unwrap();
    assert_eq!(flat_params(&p.peers[0]), flat_params(&s.peers[0]));
    for (rp, rs) in p.history.iter().zip(&s.history) {
        assert_eq!(rp.peers[0], rs.peers[0]);
        assert_eq!(rp.peers[0].tc, 0.0);
    }
}

#[test]
fn step_breakdown_matches_recomputed_loss() {
    let b = bundle(8);
    let mut cfg = config(&b, 2, 4);
    for p in &mut cfg.peers {
        p.dropout = 0.0;
    }
    let mut state = TrainRunState::new(&cfg).unwrap();
    state.curriculum.epoch = 2;
    let samples: Vec<&TrainSample> = b.train.iter().take(12).collect();
    let batch = TrainBatch::from_samples(&samples);
    let seq = SequenceBatch::from_histories(&batch.histories, &cfg.peers[0]).unwrap();
    let logits: Vec<_> = state.peers.iter().map(|p| p.logits(&seq).unwrap()).collect();
    let t = state.curriculum.progress();
    let draw = CurriculumDraw::sample(
        t,
        &cfg.distill,
        &batch.labels,
        &b.frequencies(),
        &mut rng_for(cfg.seed, &[tag::CURRICULUM, 0]),
    );
    let oracle = joint_loss(&logits, &batch.labels, &cfg.distill, &draw).unwrap();
    let rec = training_step(&batch, &mut state, &cfg, &b.frequencies(), 1e-3).unwrap();
    assert_eq!(rec.phase, draw.phase);
    for (got, want) in rec.peers.iter().zip(&oracle.per_peer) {
        assert!((got.ce - want.ce).abs() < 1e-12);
        assert!((got.tc - want.tc).abs() < 1e-12);
        assert!((got.nc - want.nc).abs() < 1e-12);
    }
}

#[test]
fn identical_peers_stay_identical() {
    let b = bundle(8);
    let mut cfg = config(&b, 2, 3);
    cfg.shared_init = true;
    for p in &mut cfg.peers {
        p.dropout = 0.0;
    }
    let out = run_training(&b, &cfg, &RunOptions::default()).unwrap();
    assert_eq!(flat_params(&out.peers[0]), flat_params(&out.peers[1]));
    assert!(out.history.iter().all(|r| r.peers[0] == r.peers[1]));
}

#[test]
fn phase_schedule_follows_thresholds() {
    let b = bundle(3);
    let mut cfg = config(&b, 2, 100);
    cfg.batch_size = b.train.len().min(8);
    cfg.validate_every = 0;
    let out = run_training(&b, &cfg, &RunOptions::default()).unwrap();
    let mut saw_difficult_mid = false;
    for r in &out.history {
        if r.epoch < 20 {
            assert_eq!(r.phase, Phase::Simple, "epoch {}", r.epoch);
        } else if r.epoch > 70 {
            assert_eq!(r.phase, Phase::Difficult, "epoch {}", r.epoch);
        } else if r.phase == Phase::Difficult {
            saw_difficult_mid = true;
        }
    }
    assert!(saw_difficult_mid);
}

#[test]
fn resume_continues_bitwise() {
    let b = bundle(8);
    let mut cfg = config(&b, 2, 4);
    cfg.keep_epoch_checkpoints = true;
    let full_dir = tempfile::tempdir().unwrap();
    let full = run_training(
        &b,
        &cfg,
        &RunOptions {
            run_dir: Some(full_dir.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(checkpoint_dir(full_dir.path(), "epoch_002").exists());
    assert!(checkpoint_dir(full_dir.path(), "final").exists());

    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        run_dir: Some(dir.path().to_path_buf()),
        stop_after: Some(2),
        ..Default::default()
    };
    let partial = run_training(&b, &cfg, &opts).unwrap();
    assert_eq!(partial.completed_epochs, 2);
    assert!(!partial.finished);
    let resumed = run_training(
        &b,
        &cfg,
        &RunOptions {
            run_dir: Some(dir.path().to_path_buf()),
            resume: true,
            stop_after: None,
        },
    )
    .unwrap();
    assert!(resumed.finished);
    assert_eq!(resumed.history, full.history);
    assert_eq!(resumed.validation, full.validation);
    for (p, q) in resumed.peers.iter().zip(&full.peers) {
        assert_eq!(flat_params(p), flat_params(q));
    }
    let log_a = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
    let log_b = std::fs::read_to_string(full_dir.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log_a, log_b);
}

#[test]
fn resume_rejects_changed_config() {
    let b = bundle(6);
    let cfg = config(&b, 2, 2);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        run_dir: Some(dir.path().to_path_buf()),
        stop_after: Some(1),
        ..Default::default()
    };
    run_training(&b, &cfg, &opts).unwrap();
    let mut changed = cfg.clone();
    changed.base_lr = 2e-3;
    let err = run_training(
        &b,
        &changed,
        &RunOptions {
            resume: true,
            ..opts
        },
    );
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn non_finite_parameters_abort_with_dump() {
    let b = bundle(6);
    let cfg = config(&b, 2, 1);
    let mut state = TrainRunState::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    state.dump_dir = Some(dir.path().to_path_buf());
    let var = &state.peers[0].params().vars()[0];
    let poisoned = (var.as_tensor() * f64::NAN).unwrap();
    var.set(&poisoned).unwrap();
    let samples: Vec<&TrainSample> = b.train.iter().take(4).collect();
    let batch = TrainBatch::from_samples(&samples);
    let err = training_step(&batch, &mut state, &cfg, &b.frequencies(), 1e-3);
    assert!(matches!(err, Err(Error::Numeric(_))));
    assert!(dir.path().join("nonfinite_step0.json").exists());
}

#[test]
fn peer_selection() {
    assert_eq!(select_peer_for_eval(2, None).unwrap(), 0);
    assert_eq!(select_peer_for_eval(2, Some(1)).unwrap(), 1);
    assert!(select_peer_for_eval(2, Some(2)).is_err());
}

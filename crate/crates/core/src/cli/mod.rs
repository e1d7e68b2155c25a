//! Command-line surface: prepare, train, evaluate, ablate and synth.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use config::{DataSection, RunConfig, TrainerSection, RESOLVED_CONFIG};

use crate::distill::Ablation;
use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, MetricsReport, RankingMetrics, RankingMode};
use crate::event_data::{
    prepare_dataset, read_bundle, read_records_file, synth_generate, write_bundle, write_json_pretty,
    write_records, DatasetBundle, Split,
};
use crate::seeding::{rng_for, tag};
use crate::trainer::{
    checkpoint_dir, load_peers, run_training, select_peer_for_eval, RunOptions, RunStateManifest,
    STATE_FILE,
};

pub mod exit_code {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const IO: i32 = 5;
}

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) => exit_code::CONFIG,
        Error::Data(_) | Error::Serde(_) => exit_code::DATA,
        Error::Numeric(_) => exit_code::NUMERIC,
        Error::Io { .. } => exit_code::IO,
        Error::Shape(_) | Error::Index { .. } | Error::Tensor(_) => exit_code::OTHER,
    }
}

#[derive(Debug, Parser)]
#[command(name = "eventdistill", version, about = "Next-event prediction with curriculum mutual distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn a raw event export into a dataset bundle.
    Prepare(PrepareArgs),
    /// Train a group of peers on a bundle.
    Train(TrainArgs),
    /// Score a trained run on the validation or test split.
    Evaluate(EvaluateArgs),
    /// Train the full model and every ablation variant and compare them.
    Ablate(AblateArgs),
    /// Write synthetic event records.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Raw delimited export.
    #[arg(long)]
    pub input: PathBuf,
    /// Bundle directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Run directory for logs, checkpoints and the resolved configuration.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from the last checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of peers.
    #[arg(long)]
    pub peers: Option<usize>,
    /// Comma-separated ablation switches: no_ctc, no_tc, no_cnc, no_nc.
    #[arg(long, value_delimiter = ',')]
    pub ablation: Vec<String>,
    /// Stop after this many completed epochs.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckpointArg {
    Best,
    Final,
    Last,
}

impl CheckpointArg {
    fn dir_name(self) -> &'static str {
        match self {
            Self::Best => "best",
            Self::Final => "final",
            Self::Last => "last",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub peer: Option<usize>,
    /// Report every peer and the spread between them.
    #[arg(long)]
    pub all_peers: bool,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "best")]
    pub checkpoint: CheckpointArg,
    /// Rank against every class instead of the sampled negatives.
    #[arg(long)]
    pub full_ranking: bool,
    /// Write the report(s) here as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds to average over; defaults to the configured trainer seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Also train a single-peer cross-entropy baseline.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output records file. With several switch probabilities each file
    /// gets a `_sp<value>` suffix.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub switch_prob: Vec<f64>,
    #[arg(long)]
    pub n_spots: Option<usize>,
    #[arg(long)]
    pub n_classes: Option<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ()),
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                exit_code::CONFIG
            } else {
                exit_code::OK
            };
        }
    };
    match run(cli) {
        Ok(()) => exit_code::OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn cmd_prepare(a: &PrepareArgs) -> Result<DatasetBundle> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.data.prepare.seed = s;
    }
    let ingested = read_records_file(&a.input, &cfg.data.columns)?;
    if !ingested.rejected.is_empty() {
        log::warn!("{} rows rejected", ingested.rejected.len());
        for r in ingested.rejected.iter().take(5) {
            log::warn!("line {}: {}", r.line, r.reason);
        }
    }
    let bundle = prepare_dataset(&ingested.records, &cfg.data.prepare)?;
    write_bundle(&bundle, &a.out)?;
    cfg.write_snapshot(&a.out.join(RESOLVED_CONFIG))?;
    println!("{}", bundle.manifest.stats.table_line());
    println!("dataset {} written to {}", bundle.manifest.dataset_id, a.out.display());
    Ok(bundle)
}

fn parse_ablation(names: &[String]) -> Result<Ablation> {
    let mut ab = Ablation::default();
    for n in names {
        match n.trim() {
            "" | "full" => {}
            "no_ctc" => ab.no_ctc = true,
            "no_tc" => ab.no_tc = true,
            "no_cnc" => ab.no_cnc = true,
            "no_nc" => ab.no_nc = true,
            other => return Err(Error::Config(format!("unknown ablation switch {other}"))),
        }
    }
    Ok(ab)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.trainer.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.trainer.total_epochs = e;
    }
    if let Some(k) = a.peers {
        cfg.trainer.peers = k;
        cfg.peer_encoders.clear();
    }
    if !a.ablation.is_empty() {
        cfg.distill.ablation = parse_ablation(&a.ablation)?;
    }
    let bundle = read_bundle(&a.bundle)?;
    let tcfg = cfg.trainer_config(&bundle)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    cfg.write_snapshot(&a.out.join(RESOLVED_CONFIG))?;
    let out = run_training(
        &bundle,
        &tcfg,
        &RunOptions {
            run_dir: Some(a.out.clone()),
            resume: a.resume,
            stop_after: a.stop_after,
        },
    )?;
    println!(
        "trained {} peers for {} epochs ({} steps)",
        tcfg.peers.len(),
        out.completed_epochs,
        out.history.len()
    );
    if let Some(b) = out.best {
        println!("best validation NDCG@5 {:.4} at epoch {}", b.score, b.epoch);
    }
    Ok(())
}

fn split_of(s: SplitArg) -> (Split, &'static str) {
    match s {
        SplitArg::Val => (Split::Val, "val"),
        SplitArg::Test => (Split::Test, "test"),
    }
}

#[derive(Debug, Serialize)]
struct EvaluationOutput {
    reports: Vec<MetricsReport>,
    /// Largest absolute difference between peers per metric.
    spread: Option<Spread>,
}

#[derive(Debug, Serialize)]
struct Spread {
    hr: Vec<(usize, f64)>,
    ndcg: Vec<(usize, f64)>,
    mrr: f64,
}

fn spread(metrics: &[&RankingMetrics]) -> Spread {
    let range = |vals: Vec<f64>| {
        let max = vals.iter().copied().fold(f64::MIN, f64::max);
        let min = vals.iter().copied().fold(f64::MAX, f64::min);
        max - min
    };
    let first = metrics[0];
    Spread {
        hr: first
            .hr
            .keys()
            .map(|&n| (n, range(metrics.iter().map(|m| m.hr_at(n)).collect())))
            .collect(),
        ndcg: first
            .ndcg
            .keys()
            .map(|&n| (n, range(metrics.iter().map(|m| m.ndcg_at(n)).collect())))
            .collect(),
        mrr: range(metrics.iter().map(|m| m.mrr).collect()),
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<Vec<MetricsReport>> {
    let cfg = RunConfig::load(Some(&a.run.join(RESOLVED_CONFIG))).or_else(|e| match e {
        Error::Io { .. } => Ok(RunConfig::default()),
        other => Err(other),
    })?;
    let bundle = read_bundle(&a.bundle)?;
    let dir = checkpoint_dir(&a.run, a.checkpoint.dir_name());
    let manifest: RunStateManifest = crate::event_data::read_json(&dir.join(STATE_FILE))?;
    if manifest.dataset_id != bundle.manifest.dataset_id {
        return Err(Error::Config(format!(
            "run was trained on dataset {}, bundle is {}",
            manifest.dataset_id, bundle.manifest.dataset_id
        )));
    }
    let peers = load_peers(&dir)?;
    let indices: Vec<usize> = if a.all_peers {
        (0..peers.len()).collect()
    } else {
        vec![select_peer_for_eval(peers.len(), a.peer.or(Some(manifest.config.eval_peer)))?]
    };
    let mut opts = cfg.eval.clone();
    if a.full_ranking {
        opts.mode = RankingMode::Full;
    }
    let (split, split_name) = split_of(a.split);
    let checkpoint_id = format!(
        "{}:epoch{}:step{}",
        a.checkpoint.dir_name(),
        manifest.next_epoch,
        manifest.step
    );
    let mut reports = Vec::new();
    for k in indices {
        let metrics = evaluate(&peers[k], bundle.pairs(split), &opts)?;
        println!("peer {k} {split_name}: {}", metrics.summary());
        reports.push(MetricsReport {
            dataset_id: bundle.manifest.dataset_id.clone(),
            checkpoint_id: checkpoint_id.clone(),
            peer: k,
            split: split_name.into(),
            mode: opts.mode,
            metrics,
        });
    }
    let spread = (reports.len() > 1).then(|| {
        let s = spread(&reports.iter().map(|r| &r.metrics).collect::<Vec<_>>());
        println!(
            "peer spread: {}",
            s.ndcg
                .iter()
                .map(|(n, v)| format!("NDCG@{n} {v:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        s
    });
    if let Some(out) = &a.out {
        write_json_pretty(
            out,
            &EvaluationOutput {
                reports: reports.clone(),
                spread,
            },
        )?;
    }
    Ok(reports)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<RankingMetrics>,
    pub mean_hr: Vec<(usize, f64)>,
    pub mean_ndcg: Vec<(usize, f64)>,
    pub mean_mrr: f64,
}

fn mean_row(variant: &str, seeds: &[u64], per_seed: Vec<RankingMetrics>) -> AblationRow {
    let n = per_seed.len() as f64;
    let first = &per_seed[0];
    let mean = |f: &dyn Fn(&RankingMetrics) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
    AblationRow {
        variant: variant.into(),
        seeds: seeds.to_vec(),
        mean_hr: first.hr.keys().map(|&c| (c, mean(&|m| m.hr_at(c)))).collect(),
        mean_ndcg: first.ndcg.keys().map(|&c| (c, mean(&|m| m.ndcg_at(c)))).collect(),
        mean_mrr: mean(&|m| m.mrr),
        per_seed,
    }
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let Some(first) = rows.first() else {
        return out;
    };
    let mut header = vec!["variant".to_string()];
    header.extend(first.mean_hr.iter().map(|(n, _)| format!("HR@{n}")));
    header.extend(first.mean_ndcg.iter().map(|(n, _)| format!("NDCG@{n}")));
    header.push("MRR".into());
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let mut cells = vec![r.variant.clone()];
        cells.extend(r.mean_hr.iter().map(|(_, v)| format!("{v:.4}")));
        cells.extend(r.mean_ndcg.iter().map(|(_, v)| format!("{v:.4}")));
        cells.push(format!("{:.4}", r.mean_mrr));
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
    out
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<Vec<AblationRow>> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.trainer.total_epochs = e;
    }
    let seeds = if a.seeds.is_empty() {
        vec![cfg.trainer.seed]
    } else {
        a.seeds.clone()
    };
    let bundle = read_bundle(&a.bundle)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    cfg.write_snapshot(&a.out.join(RESOLVED_CONFIG))?;

    let mut variants: Vec<(String, Ablation, Option<usize>)> = Vec::new();
    if a.baseline {
        variants.push((
            "ce_baseline".into(),
            Ablation {
                no_tc: true,
                no_nc: true,
                ..Default::default()
            },
            Some(1),
        ));
    }
    variants.extend(
        Ablation::VARIANTS
            .iter()
            .map(|(name, ab)| (name.to_string(), *ab, None)),
    );

    let mut rows = Vec::new();
    for (name, ablation, peers) in &variants {
        let mut per_seed = Vec::new();
        for &seed in &seeds {
            let mut c = cfg.clone();
            c.trainer.seed = seed;
            c.distill.ablation = *ablation;
            if let Some(k) = peers {
                c.trainer.peers = *k;
                c.peer_encoders.truncate(*k);
            }
            let tcfg = c.trainer_config(&bundle)?;
            let run_dir = a.out.join(format!("{name}_seed{seed}"));
            let out = run_training(
                &bundle,
                &tcfg,
                &RunOptions {
                    run_dir: Some(run_dir),
                    ..Default::default()
                },
            )?;
            let peer = &out.selected_peers()[tcfg.eval_peer.min(out.peers.len() - 1)];
            let m = evaluate(peer, &bundle.test, &c.eval)?;
            println!("{name} seed {seed}: {}", m.summary());
            per_seed.push(m);
        }
        rows.push(mean_row(name, &seeds, per_seed));
    }
    let table = ablation_table(&rows);
    print!("{table}");
    std::fs::write(a.out.join("ablation.md"), &table).map_err(|e| Error::io(&a.out, e))?;
    write_json_pretty(&a.out.join("ablation.json"), &rows)?;
    Ok(rows)
}

fn suffixed(path: &Path, p: f64) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("synth");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}_sp{p}.{ext}"))
}

/// Returns the files written.
pub fn cmd_synth(a: &SynthArgs) -> Result<Vec<PathBuf>> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    if let Some(n) = a.n_spots {
        cfg.synth.n_spots = n;
    }
    if let Some(n) = a.n_classes {
        cfg.synth.n_classes = n;
    }
    let probs = if a.switch_prob.is_empty() {
        vec![cfg.synth.switch_prob]
    } else {
        a.switch_prob.clone()
    };
    let mut written = Vec::new();
    for &p in &probs {
        let mut c = cfg.clone();
        c.synth.switch_prob = p;
        let path = if probs.len() > 1 {
            suffixed(&a.out, p)
        } else {
            a.out.clone()
        };
        let data = synth_generate(&c.synth, &mut rng_for(c.synth.seed, &[tag::SYNTH]))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_records(std::io::BufWriter::new(file), &data.records)?;
        c.write_snapshot(&path.with_extension("resolved.toml"))?;
        println!("{} records written to {}", data.records.len(), path.display());
        written.push(path);
    }
    Ok(written)
}

/// Loads every peer stored in a run checkpoint.
pub fn load_run_peers(run_dir: &Path, which: &str) -> Result<Vec<Encoder>> {
    load_peers(&checkpoint_dir(run_dir, which))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names_parse() {
        let ab = parse_ablation(&["no_ctc".into(), "no_nc".into()]).unwrap();
        assert!(ab.no_ctc && ab.no_nc && !ab.no_tc && !ab.no_cnc);
        assert!(matches!(parse_ablation(&["bogus".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            exit_code_for(&Error::Config(String::new())),
            exit_code_for(&Error::Data(String::new())),
            exit_code_for(&Error::Numeric(String::new())),
            exit_code_for(&Error::io("x", std::io::Error::other("x"))),
        ];
        let mut sorted = codes.to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), codes.len());
        assert!(!codes.contains(&exit_code::OK));
    }

    #[test]
    fn sweep_file_names() {
        assert_eq!(
            suffixed(Path::new("out/s.csv"), 0.3),
            PathBuf::from("out/s_sp0.3.csv")
        );
    }
}

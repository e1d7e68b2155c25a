//! Dataset preparation and the on-disk bundle.
//!
//! A bundle is a directory holding:
//!
//! | file             | contents                                              |
//! |------------------|-------------------------------------------------------|
//! | `manifest.json`  | format tag, version, preparation options, statistics  |
//! | `vocab.json`     | classes in id order and training frequencies           |
//! | `sequences.json` | per-spot key and chronological class ids              |
//! | `train.json`     | `(spot, input, target)` training samples               |
//! | `val.json`       | `(spot, history, target, negatives)` validation pairs |
//! | `test.json`      | same layout for the test pairs                        |
//!
//! All integer arrays are plain JSON arrays of class ids. Padding is not
//! stored; it is applied when batches are built.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::negatives::{popularity_negatives, DEFAULT_NEGATIVES};
use super::records::EventRecord;
use super::sequences::{
    build_sequences, retain_dense_spots, split_and_window, SpotSequence, TrainSample,
    MIN_SPOT_EVENTS,
};
use super::vocab::{build_vocabulary, Vocabulary};
use crate::error::{Error, Result};
use crate::seeding::{rng_for, tag};

pub const BUNDLE_FORMAT: &str = "eventdistill-bundle";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopularitySource {
    /// Training positions only.
    Train,
    /// Every event of every retained spot.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareOptions {
    pub max_len: usize,
    pub min_events: usize,
    pub negatives: usize,
    /// Added to every class frequency before sampling negatives.
    pub negative_smoothing: f64,
    pub popularity: PopularitySource,
    pub seed: u64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            max_len: 200,
            min_events: MIN_SPOT_EVENTS,
            negatives: DEFAULT_NEGATIVES,
            negative_smoothing: 0.0,
            popularity: PopularitySource::Train,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub spot: u32,
    pub history: Vec<u32>,
    pub target: u32,
    pub negatives: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub spots: usize,
    pub records: usize,
    pub max_per_spot: usize,
    pub min_per_spot: usize,
    pub avg_per_spot: f64,
    pub std_per_spot: f64,
    pub classes: usize,
    pub train_samples: usize,
    /// Evaluation pairs with fewer negatives than requested.
    pub short_negative_lists: usize,
}

impl DatasetStats {
    pub fn from_sequences(seqs: &[SpotSequence], classes: usize) -> Self {
        let lens: Vec<f64> = seqs.iter().map(|s| s.events.len() as f64).collect();
        let n = lens.len().max(1) as f64;
        let avg = lens.iter().sum::<f64>() / n;
        let var = lens.iter().map(|l| (l - avg).powi(2)).sum::<f64>() / n;
        Self {
            spots: seqs.len(),
            records: seqs.iter().map(|s| s.events.len()).sum(),
            max_per_spot: seqs.iter().map(|s| s.events.len()).max().unwrap_or(0),
            min_per_spot: seqs.iter().map(|s| s.events.len()).min().unwrap_or(0),
            avg_per_spot: avg,
            std_per_spot: var.sqrt(),
            classes,
            train_samples: 0,
            short_negative_lists: 0,
        }
    }

    pub fn table_line(&self) -> String {
        format!(
            "{} spots / {} records / {} classes | per spot max {} min {} avg {:.2} std {:.2} | {} training samples",
            group_thousands(self.spots),
            group_thousands(self.records),
            group_thousands(self.classes),
            self.max_per_spot,
            self.min_per_spot,
            self.avg_per_spot,
            self.std_per_spot,
            self.train_samples,
        )
    }
}

fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub version: u32,
    pub dataset_id: String,
    pub options: PrepareOptions,
    pub stats: DatasetStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub manifest: BundleManifest,
    pub vocab: Vocabulary,
    pub sequences: Vec<SpotSequence>,
    pub train: Vec<TrainSample>,
    pub val: Vec<EvalPair>,
    pub test: Vec<EvalPair>,
}

impl DatasetBundle {
    pub fn n_classes(&self) -> usize {
        self.vocab.len()
    }

    /// Training frequencies as floats, for curriculum masks.
    pub fn frequencies(&self) -> Vec<f64> {
        self.vocab.weights(0.0)
    }

    pub fn pairs(&self, split: Split) -> &[EvalPair] {
        match split {
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Val,
    Test,
}

/// Full preparation pipeline: spot filtering, vocabulary, sequences,
/// leave-last-out splits, frequencies and negatives.
pub fn prepare_dataset(records: &[EventRecord], opts: &PrepareOptions) -> Result<DatasetBundle> {
    if opts.max_len < 2 {
        return Err(Error::Config("max_len must be at least 2".into()));
    }
    if opts.min_events < 3 {
        return Err(Error::Config("min_events must be at least 3".into()));
    }
    let retained = retain_dense_spots(records, opts.min_events);
    if retained.is_empty() {
        return Err(Error::Data(format!(
            "no spot has at least {} events",
            opts.min_events
        )));
    }
    let mut vocab = build_vocabulary(&retained)?;
    let sequences = build_sequences(&retained, &vocab, opts.min_events)?;

    let mut train = Vec::new();
    let mut held = Vec::with_capacity(sequences.len());
    let mut train_positions: Vec<u32> = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        let split = split_and_window(i as u32, seq, opts.max_len)?;
        train_positions.extend(split.windows.iter().flatten().copied());
        train.extend(split.train);
        held.push((split.val, split.test));
    }
    match opts.popularity {
        PopularitySource::Train => vocab.count_frequencies(&train_positions),
        PopularitySource::All => {
            vocab.count_frequencies(sequences.iter().flat_map(|s| s.events.iter()))
        }
    }

    let weights = vocab.weights(opts.negative_smoothing);
    let mut short = 0usize;
    let mut val = Vec::with_capacity(held.len());
    let mut test = Vec::with_capacity(held.len());
    for (i, (seq, (v, t))) in sequences.iter().zip(held).enumerate() {
        let mut exclude = vec![false; vocab.len()];
        for &id in &seq.events {
            exclude[id as usize] = true;
        }
        for (which, pair, out) in [(0u64, v, &mut val), (1u64, t, &mut test)] {
            let mut rng = rng_for(opts.seed, &[tag::NEGATIVES, i as u64, which]);
            let negatives = popularity_negatives(&weights, &exclude, opts.negatives, &mut rng);
            if negatives.len() < opts.negatives {
                short += 1;
            }
            out.push(EvalPair {
                spot: i as u32,
                history: pair.history,
                target: pair.target,
                negatives,
            });
        }
    }
    if short > 0 {
        log::warn!(
            "{short} evaluation pairs have fewer than {} eligible negatives",
            opts.negatives
        );
    }

    let mut stats = DatasetStats::from_sequences(&sequences, vocab.len());
    stats.train_samples = train.len();
    stats.short_negative_lists = short;
    let mut bundle = DatasetBundle {
        manifest: BundleManifest {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            dataset_id: String::new(),
            options: opts.clone(),
            stats,
        },
        vocab,
        sequences,
        train,
        val,
        test,
    };
    bundle.manifest.dataset_id = content_id(&bundle)?;
    Ok(bundle)
}

fn content_id(bundle: &DatasetBundle) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&bundle.vocab)?);
    h.update(serde_json::to_vec(&bundle.train)?);
    h.update(serde_json::to_vec(&bundle.val)?);
    h.update(serde_json::to_vec(&bundle.test)?);
    let digest = h.finalize();
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(std::io::BufWriter::new(file), value)?;
    Ok(())
}

pub(crate) fn write_json_pretty<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

pub fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json_pretty(&dir.join("manifest.json"), &bundle.manifest)?;
    write_json_pretty(&dir.join("vocab.json"), &bundle.vocab)?;
    write_json(&dir.join("sequences.json"), &bundle.sequences)?;
    write_json(&dir.join("train.json"), &bundle.train)?;
    write_json(&dir.join("val.json"), &bundle.val)?;
    write_json(&dir.join("test.json"), &bundle.test)?;
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<DatasetBundle> {
    let manifest: BundleManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(Error::Data(format!(
            "{} is not a dataset bundle (format {:?})",
            dir.display(),
            manifest.format
        )));
    }
    if manifest.version != BUNDLE_VERSION {
        return Err(Error::Data(format!(
            "unsupported bundle version {} (expected {BUNDLE_VERSION})",
            manifest.version
        )));
    }
    let vocab: Vocabulary = read_json(&dir.join("vocab.json"))?;
    let bundle = DatasetBundle {
        manifest,
        vocab: vocab.after_load()?,
        sequences: read_json(&dir.join("sequences.json"))?,
        train: read_json(&dir.join("train.json"))?,
        val: read_json(&dir.join("val.json"))?,
        test: read_json(&dir.join("test.json"))?,
    };
    let n = bundle.vocab.len() as u32;
    let ids_ok = bundle
        .train
        .iter()
        .all(|s| s.target < n && s.input.iter().all(|&i| i < n))
        && bundle
            .val
            .iter()
            .chain(&bundle.test)
            .all(|p| p.target < n && p.history.iter().chain(&p.negatives).all(|&i| i < n));
    if !ids_ok {
        return Err(Error::Data("bundle contains class ids outside the vocabulary".into()));
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_grouping() {
        assert_eq!(group_thousands(473887), "473,887");
        assert_eq!(group_thousands(3229), "3,229");
        assert_eq!(group_thousands(440), "440");
    }
}

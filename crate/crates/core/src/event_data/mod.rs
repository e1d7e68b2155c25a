//! Raw event ingestion, vocabulary, per-spot sequences, leave-last-out
//! splits, popularity negatives and synthetic data.

mod bundle;
mod negatives;
mod records;
mod sequences;
mod synth;
mod vocab;

pub use bundle::{
    prepare_dataset, read_bundle, write_bundle, BundleManifest, DatasetBundle, DatasetStats,
    EvalPair, PopularitySource, PrepareOptions, Split, BUNDLE_FORMAT, BUNDLE_VERSION,
};
pub(crate) use bundle::{read_json, write_json, write_json_pretty};
pub use negatives::{popularity_negatives, DEFAULT_NEGATIVES};
pub use records::{
    parse_timestamp, read_records, read_records_file, slot_of_timestamp, write_records,
    ColumnMapping, EventRecord, Ingested, RejectedRow, CANONICAL_TIMESTAMP_FORMAT,
};
pub use sequences::{
    build_sequences, group_by_spot, retain_dense_spots, split_and_window, window_ranges, HeldOut,
    SpotKey, SpotSequence, SpotSplit, TrainSample, MIN_SPOT_EVENTS,
};
pub use synth::{class_identity, synth_generate, Intent, SynthConfig, SyntheticData};
pub use vocab::{build_vocabulary, EventClass, Vocabulary};

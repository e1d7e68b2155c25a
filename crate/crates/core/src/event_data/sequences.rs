use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::records::EventRecord;
use super::vocab::{EventClass, Vocabulary};
use crate::error::{Error, Result};

/// Spots with fewer events are dropped.
pub const MIN_SPOT_EVENTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpotKey {
    pub precinct: String,
    pub premises: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpotSequence {
    pub key: SpotKey,
    /// Class ids in chronological order.
    pub events: Vec<u32>,
}

/// Groups records by spot, ordered by key; within a spot records are
/// stably sorted by timestamp so ties keep input order.
pub fn group_by_spot(records: &[EventRecord]) -> BTreeMap<SpotKey, Vec<&EventRecord>> {
    let mut groups: BTreeMap<SpotKey, Vec<&EventRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry(SpotKey {
                precinct: r.precinct.clone(),
                premises: r.premises.clone(),
            })
            .or_default()
            .push(r);
    }
    for events in groups.values_mut() {
        events.sort_by_key(|r| r.timestamp);
    }
    groups
}

/// Records belonging to spots with at least `min_events` events, in input
/// order.
pub fn retain_dense_spots(records: &[EventRecord], min_events: usize) -> Vec<EventRecord> {
    let groups = group_by_spot(records);
    let keep: std::collections::BTreeSet<&SpotKey> = groups
        .iter()
        .filter(|(_, evs)| evs.len() >= min_events)
        .map(|(k, _)| k)
        .collect();
    records
        .iter()
        .filter(|r| {
            keep.contains(&SpotKey {
                precinct: r.precinct.clone(),
                premises: r.premises.clone(),
            })
        })
        .cloned()
        .collect()
}

/// Chronological class-id sequences for spots with at least `min_events`
/// events.
pub fn build_sequences(
    records: &[EventRecord],
    vocab: &Vocabulary,
    min_events: usize,
) -> Result<Vec<SpotSequence>> {
    let mut out = Vec::new();
    let mut dropped = 0usize;
    for (key, events) in group_by_spot(records) {
        if events.len() < min_events {
            dropped += 1;
            continue;
        }
        let ids = events
            .iter()
            .map(|r| {
                let class = EventClass::of(r);
                vocab
                    .id_of(&class)
                    .ok_or_else(|| Error::Data(format!("class {class:?} missing from vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(SpotSequence { key, events: ids });
    }
    if dropped > 0 {
        log::info!("dropped {dropped} spots with fewer than {min_events} events");
    }
    Ok(out)
}

/// Non-overlapping chunks of at most `max_len`, taken from the right end.
/// The leftmost chunk may be shorter. Returned left to right.
pub fn window_ranges(len: usize, max_len: usize) -> Vec<Range<usize>> {
    assert!(max_len > 0, "window length must be positive");
    let mut out = Vec::new();
    let mut end = len;
    while end > 0 {
        let start = end.saturating_sub(max_len);
        out.push(start..end);
        end = start;
    }
    out.reverse();
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSample {
    pub spot: u32,
    pub input: Vec<u32>,
    pub target: u32,
}

/// History from a spot's past plus its held-out target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldOut {
    pub history: Vec<u32>,
    pub target: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpotSplit {
    /// Training prefix windows, left to right.
    pub windows: Vec<Vec<u32>>,
    pub train: Vec<TrainSample>,
    pub val: HeldOut,
    pub test: HeldOut,
}

/// Leave-last-out split of one spot: the last event is the test target,
/// the one before it the validation target, and the remaining prefix is cut
/// into windows. Every position after the first of a window becomes a
/// training target with the preceding part of that window as input.
pub fn split_and_window(spot: u32, seq: &SpotSequence, max_len: usize) -> Result<SpotSplit> {
    let n = seq.events.len();
    if n < 3 {
        return Err(Error::Data(format!(
            "spot {:?} has {n} events; a split needs at least 3",
            seq.key
        )));
    }
    if max_len < 2 {
        return Err(Error::Config("max sequence length must be at least 2".into()));
    }
    let ev = &seq.events;
    let test = HeldOut {
        history: ev[..n - 1].to_vec(),
        target: ev[n - 1],
    };
    let val = HeldOut {
        history: ev[..n - 2].to_vec(),
        target: ev[n - 2],
    };
    let prefix = &ev[..n - 2];
    let windows: Vec<Vec<u32>> = window_ranges(prefix.len(), max_len)
        .into_iter()
        .map(|r| prefix[r].to_vec())
        .collect();
    let train = windows
        .iter()
        .flat_map(|w| {
            (1..w.len()).map(move |j| TrainSample {
                spot,
                input: w[..j].to_vec(),
                target: w[j],
            })
        })
        .collect();
    Ok(SpotSplit {
        windows,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_data::records::{parse_timestamp, CANONICAL_TIMESTAMP_FORMAT};
    use crate::event_data::vocab::build_vocabulary;

    fn rec(spot: &str, ts: &str, cat: &str) -> EventRecord {
        EventRecord {
            precinct: "7".into(),
            premises: spot.into(),
            timestamp: parse_timestamp(ts, CANONICAL_TIMESTAMP_FORMAT).unwrap(),
            category: cat.into(),
        }
    }

    #[test]
    fn spots_below_five_events_are_dropped() {
        let mut records = Vec::new();
        for d in 1..=4 {
            records.push(rec("SHOP", &format!("2016-01-0{d} 10:00"), "A"));
        }
        for d in 1..=5 {
            records.push(rec("HOUSE", &format!("2016-01-0{d} 10:00"), "B"));
        }
        let vocab = build_vocabulary(&records).unwrap();
        let seqs = build_sequences(&records, &vocab, MIN_SPOT_EVENTS).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].key.premises, "HOUSE");
        assert_eq!(seqs[0].events.len(), 5);
        assert_eq!(retain_dense_spots(&records, MIN_SPOT_EVENTS).len(), 5);
    }

    #[test]
    fn chronological_with_stable_ties() {
        let records = vec![
            rec("S", "2016-01-03 10:00", "C"),
            rec("S", "2016-01-01 10:00", "A"),
            rec("S", "2016-01-02 10:00", "B"),
            rec("S", "2016-01-02 10:00", "D"),
            rec("S", "2016-01-01 10:00", "E"),
        ];
        let vocab = build_vocabulary(&records).unwrap();
        let seqs = build_sequences(&records, &vocab, 5).unwrap();
        let cats: Vec<&str> = seqs[0]
            .events
            .iter()
            .map(|&id| vocab.class(id).unwrap().category.as_str())
            .collect();
        assert_eq!(cats, vec!["A", "E", "B", "D", "C"]);
    }

    #[test]
    fn leave_last_out() {
        let seq = SpotSequence {
            key: SpotKey {
                precinct: "1".into(),
                premises: "X".into(),
            },
            events: vec![10, 11, 12, 13, 14],
        };
        let s = split_and_window(0, &seq, 200).unwrap();
        assert_eq!(s.test, HeldOut { history: vec![10, 11, 12, 13], target: 14 });
        assert_eq!(s.val, HeldOut { history: vec![10, 11, 12], target: 13 });
        assert_eq!(s.windows, vec![vec![10, 11, 12]]);
        let targets: Vec<u32> = s.train.iter().map(|t| t.target).collect();
        assert_eq!(targets, vec![11, 12]);
        assert!(s.train.iter().all(|t| t.target != 13 && t.target != 14));
    }

    #[test]
    fn right_to_left_windows() {
        // Positions 1..=450 in 1-based terms: (250, 450], (50, 250], (0, 50].
        let w = window_ranges(450, 200);
        assert_eq!(w, vec![0..50, 50..250, 250..450]);
        assert_eq!(window_ranges(200, 200), vec![0..200]);
        assert_eq!(window_ranges(201, 200), vec![0..1, 1..201]);
        assert!(window_ranges(0, 200).is_empty());
    }

    #[test]
    fn train_inputs_fit_model_length() {
        let seq = SpotSequence {
            key: SpotKey {
                precinct: "1".into(),
                premises: "X".into(),
            },
            events: (0..30).collect(),
        };
        let s = split_and_window(3, &seq, 8).unwrap();
        assert!(s.train.iter().all(|t| t.input.len() <= 7 && t.spot == 3));
        let covered: usize = s.windows.iter().map(Vec::len).sum();
        assert_eq!(covered, 28);
    }
}

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::records::{slot_of_timestamp, EventRecord};
use crate::error::{Error, Result};

/// A prediction class: a 3-hour slot paired with an event category.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventClass {
    pub slot: u8,
    pub category: String,
}

impl EventClass {
    pub fn of(record: &EventRecord) -> Self {
        Self {
            slot: slot_of_timestamp(&record.timestamp),
            category: record.category.clone(),
        }
    }
}

/// Dense class ids `0..n` sorted by `(slot, category)`, followed by the
/// padding id `n` and the mask id `n + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    classes: Vec<EventClass>,
    /// Occurrences at training positions, per class id.
    frequency: Vec<u64>,
    #[serde(skip)]
    index: HashMap<EventClass, u32>,
}

impl Vocabulary {
    pub fn from_classes(classes: Vec<EventClass>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Data("vocabulary needs at least one class".into()));
        }
        let mut vocab = Self {
            frequency: vec![0; classes.len()],
            classes,
            index: HashMap::new(),
        };
        vocab.reindex()?;
        Ok(vocab)
    }

    fn reindex(&mut self) -> Result<()> {
        self.index = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i as u32))
            .collect();
        if self.index.len() != self.classes.len() {
            return Err(Error::Data("duplicate event classes in vocabulary".into()));
        }
        if self.frequency.len() != self.classes.len() {
            return Err(Error::Data("frequency table length differs from class count".into()));
        }
        Ok(())
    }

    /// Restores the lookup table after deserialization.
    pub(crate) fn after_load(mut self) -> Result<Self> {
        self.reindex()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn pad_id(&self) -> u32 {
        self.classes.len() as u32
    }

    pub fn mask_id(&self) -> u32 {
        self.classes.len() as u32 + 1
    }

    /// Classes plus the two special tokens.
    pub fn token_count(&self) -> usize {
        self.classes.len() + 2
    }

    pub fn id_of(&self, class: &EventClass) -> Option<u32> {
        self.index.get(class).copied()
    }

    pub fn class(&self, id: u32) -> Option<&EventClass> {
        self.classes.get(id as usize)
    }

    pub fn classes(&self) -> &[EventClass] {
        &self.classes
    }

    pub fn frequency(&self) -> &[u64] {
        &self.frequency
    }

    /// Recounts frequencies from the given id occurrences.
    pub fn count_frequencies<'a>(&mut self, ids: impl IntoIterator<Item = &'a u32>) {
        self.frequency.iter_mut().for_each(|f| *f = 0);
        for &id in ids {
            if let Some(f) = self.frequency.get_mut(id as usize) {
                *f += 1;
            }
        }
    }

    /// `frequency + smoothing` as sampling weights.
    pub fn weights(&self, smoothing: f64) -> Vec<f64> {
        self.frequency.iter().map(|&f| f as f64 + smoothing).collect()
    }
}

/// One id per distinct `(slot, category)` pair. Frequencies start at zero
/// and are filled once the training split is known.
pub fn build_vocabulary(records: &[EventRecord]) -> Result<Vocabulary> {
    if records.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from zero records".into()));
    }
    let classes: BTreeSet<EventClass> = records.iter().map(EventClass::of).collect();
    Vocabulary::from_classes(classes.into_iter().collect())
}

//! Interaction logs, leave-one-out sequence datasets and training batches.

mod batch;
mod dataset;
mod io;
pub mod synthetic;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use batch::{left_pad, BatchSampler, NegativePolicy, TrainingBatch};
pub use dataset::{build_dataset, DatasetSummary, SequenceDataset, Split};
pub use io::{load_interactions, parse_interactions, InteractionFormat};

/// Dense item index reserved for padding.
pub const PAD: usize = 0;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("input contains no interactions")]
    EmptyInput,
    #[error("no users left after filtering with min_interactions={0}")]
    EmptyDataset(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bijection between raw string ids and dense indices starting at `offset`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    offset: usize,
    raw: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn with_offset(offset: usize) -> Self {
        Vocab {
            offset,
            raw: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.offset + self.raw.len();
        self.raw.push(raw.to_string());
        self.index.insert(raw.to_string(), i);
        i
    }

    pub fn get(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, index: usize) -> Option<&str> {
        index
            .checked_sub(self.offset)
            .and_then(|i| self.raw.get(i))
            .map(String::as_str)
    }

    /// Number of interned ids (excluding the reserved offset range).
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .raw
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i + self.offset))
            .collect();
    }
}

/// One interaction event in dense indices.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

/// Raw interaction events in input-file order.
///
/// Users are indexed densely in `[0, m)`; items in `[1, n)` with `0` kept
/// for padding.
#[derive(Clone, Debug)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    pub users: Vocab,
    pub items: Vocab,
}

impl InteractionLog {
    pub fn new() -> Self {
        InteractionLog {
            records: Vec::new(),
            users: Vocab::with_offset(0),
            items: Vocab::with_offset(1),
        }
    }

    pub fn push(&mut self, user: &str, item: &str, timestamp: i64) {
        let user = self.users.intern(user);
        let item = self.items.intern(item);
        self.records.push(Interaction { user, item, timestamp });
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes the canonical tab-separated form.
    pub fn write_tsv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            writeln!(
                out,
                "{}\t{}\t{}",
                self.users.raw(r.user).unwrap_or_default(),
                self.items.raw(r.item).unwrap_or_default(),
                r.timestamp
            )?;
        }
        Ok(())
    }
}

impl Default for InteractionLog {
    fn default() -> Self {
        Self::new()
    }
}

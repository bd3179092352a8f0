use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SequenceDataset, PAD};

/// Left-pads (or keeps the last `width` of) `items` to exactly `width` slots.
pub fn left_pad(items: &[usize], width: usize) -> Vec<usize> {
    let keep = &items[items.len().saturating_sub(width)..];
    let mut row = vec![PAD; width - keep.len()];
    row.extend_from_slice(keep);
    row
}

/// Which items a sampled negative must avoid besides padding.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePolicy {
    /// Anything but the position's target.
    #[default]
    ExcludeTarget,
    /// Anything outside the user's whole sequence.
    ExcludeHistory,
}

/// Shifted next-item training rows, `b x width`, row-major.
///
/// Column `j` corresponds to absolute position `offset + j` of the length-`T`
/// padded layout; `offset > 0` only when leading all-padding columns were
/// trimmed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub users: Vec<usize>,
    pub width: usize,
    pub offset: usize,
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub negative_ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn real_positions(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Draws user batches without replacement within each epoch.
///
/// Shuffling and negative sampling use separate seeded streams.
pub struct BatchSampler<'a> {
    dataset: &'a SequenceDataset,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    shuffle_rng: ChaCha8Rng,
    negative_rng: ChaCha8Rng,
    policy: NegativePolicy,
    trim: bool,
}

impl<'a> BatchSampler<'a> {
    pub fn new(dataset: &'a SequenceDataset, batch_size: usize, shuffle_seed: u64, negative_seed: u64) -> Self {
        assert!(batch_size > 0, "batch size must be positive");
        BatchSampler {
            dataset,
            batch_size,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            shuffle_rng: ChaCha8Rng::seed_from_u64(shuffle_seed),
            negative_rng: ChaCha8Rng::seed_from_u64(negative_seed),
            policy: NegativePolicy::ExcludeTarget,
            trim: false,
        }
    }

    pub fn with_policy(mut self, policy: NegativePolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Drop leading columns that are padding in every row of a batch.
    pub fn with_trim(mut self, trim: bool) -> Self {
        self.trim = trim;
        self
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.num_users().div_ceil(self.batch_size)
    }

    /// Number of epochs started so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Next batch; a new shuffled pass starts when the current one is used up.
    pub fn next_batch(&mut self) -> TrainingBatch {
        if self.cursor >= self.order.len() {
            self.order = (0..self.dataset.num_users()).collect();
            self.order.shuffle(&mut self.shuffle_rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let users = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        self.build(users)
    }

    /// All batches of one full epoch.
    pub fn epoch_batches(&mut self) -> Vec<TrainingBatch> {
        self.cursor = self.order.len();
        let mut out = Vec::with_capacity(self.batches_per_epoch());
        loop {
            out.push(self.next_batch());
            if self.cursor >= self.order.len() {
                break;
            }
        }
        out
    }

    fn build(&mut self, users: Vec<usize>) -> TrainingBatch {
        let t = self.dataset.max_len();
        let n = self.dataset.num_items();
        let mut input_ids = Vec::with_capacity(users.len() * t);
        let mut target_ids = Vec::with_capacity(users.len() * t);
        let mut negative_ids = Vec::with_capacity(users.len() * t);
        let mut mask = Vec::with_capacity(users.len() * t);
        let mut longest = 0;
        for &u in &users {
            let prefix = self.dataset.train_prefix(u);
            let pairs = prefix.len().saturating_sub(1);
            let start = pairs.saturating_sub(t);
            let inputs = &prefix[start..pairs];
            let targets = &prefix[start + 1..pairs + 1];
            longest = longest.max(inputs.len());
            input_ids.extend(left_pad(inputs, t));
            target_ids.extend(left_pad(targets, t));
            let history: HashSet<usize> = match self.policy {
                NegativePolicy::ExcludeHistory => self.dataset.sequence(u).iter().copied().collect(),
                NegativePolicy::ExcludeTarget => HashSet::new(),
            };
            for (j, &target) in left_pad(targets, t).iter().enumerate() {
                let real = j >= t - inputs.len();
                mask.push(real);
                negative_ids.push(if real {
                    sample_negative(&mut self.negative_rng, n, target, &history)
                } else {
                    PAD
                });
            }
        }
        let mut batch = TrainingBatch {
            users,
            width: t,
            offset: 0,
            input_ids,
            target_ids,
            negative_ids,
            mask,
        };
        if self.trim && longest < t {
            trim_columns(&mut batch, t - longest.max(1));
        }
        batch
    }
}

fn trim_columns(batch: &mut TrainingBatch, drop: usize) {
    let width = batch.width - drop;
    let keep = |v: &[usize]| -> Vec<usize> { v.chunks(batch.width).flat_map(|r| r[drop..].iter().copied()).collect() };
    batch.input_ids = keep(&batch.input_ids);
    batch.target_ids = keep(&batch.target_ids);
    batch.negative_ids = keep(&batch.negative_ids);
    batch.mask = batch
        .mask
        .chunks(batch.width)
        .flat_map(|r| r[drop..].iter().copied())
        .collect();
    batch.offset = drop;
    batch.width = width;
}

fn sample_negative<R: Rng>(rng: &mut R, n: usize, target: usize, history: &HashSet<usize>) -> usize {
    assert!(n > 2, "need at least two real items to sample negatives");
    loop {
        let candidate = rng.random_range(1..n);
        if candidate != target && !history.contains(&candidate) {
            return candidate;
        }
    }
}

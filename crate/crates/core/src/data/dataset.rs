use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{DataError, InteractionLog, Vocab};

/// Which held-out target an evaluation uses.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Validation,
    Test,
}

/// Per-user chronological item sequences with a leave-one-out split.
///
/// For a user sequence `[v1 .. vL]`, `vL` is the test target, `vL-1` the
/// validation target, and `v1 .. vL-2` the training prefix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceDataset {
    sequences: Vec<Vec<usize>>,
    num_items: usize,
    max_len: usize,
    users: Vocab,
    items: Vocab,
}

/// Dataset statistics in the usual reporting columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: f64,
    pub avg_length: f64,
}

/// Filters users and items to at least `min_interactions` events (repeated
/// until nothing changes), orders each user's events by timestamp with ties
/// kept in file order, and re-indexes densely.
pub fn build_dataset(log: &InteractionLog, min_interactions: usize, max_len: usize) -> Result<SequenceDataset, DataError> {
    if min_interactions < 3 {
        return Err(DataError::InvalidArgument(format!(
            "min_interactions must be at least 3, got {}",
            min_interactions
        )));
    }
    if max_len < 2 {
        return Err(DataError::InvalidArgument(format!("T must be at least 2, got {}", max_len)));
    }
    let mut alive = vec![true; log.records.len()];
    loop {
        let mut user_count: HashMap<usize, usize> = HashMap::new();
        let mut item_count: HashMap<usize, usize> = HashMap::new();
        for (r, _) in log.records.iter().zip(&alive).filter(|(_, &a)| a) {
            *user_count.entry(r.user).or_default() += 1;
            *item_count.entry(r.item).or_default() += 1;
        }
        let mut changed = false;
        for (r, a) in log.records.iter().zip(alive.iter_mut()) {
            if *a && (user_count[&r.user] < min_interactions || item_count[&r.item] < min_interactions) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut users = Vocab::with_offset(0);
    let mut items = Vocab::with_offset(1);
    let mut events: Vec<Vec<(i64, usize)>> = Vec::new();
    for (r, _) in log.records.iter().zip(&alive).filter(|(_, &a)| a) {
        let u = users.intern(log.users.raw(r.user).expect("user in vocab"));
        let i = items.intern(log.items.raw(r.item).expect("item in vocab"));
        if u == events.len() {
            events.push(Vec::new());
        }
        events[u].push((r.timestamp, i));
    }
    if events.is_empty() {
        return Err(DataError::EmptyDataset(min_interactions));
    }
    let sequences = events
        .into_iter()
        .map(|mut ev| {
            // stable: ties keep input order
            ev.sort_by_key(|&(ts, _)| ts);
            ev.into_iter().map(|(_, i)| i).collect()
        })
        .collect();
    Ok(SequenceDataset {
        sequences,
        num_items: items.len() + 1,
        max_len,
        users,
        items,
    })
}

impl SequenceDataset {
    /// Builds a dataset directly from dense sequences (items in `1..num_items`).
    pub fn from_sequences(sequences: Vec<Vec<usize>>, num_items: usize, max_len: usize) -> Result<Self, DataError> {
        if sequences.is_empty() {
            return Err(DataError::EmptyDataset(0));
        }
        for (u, s) in sequences.iter().enumerate() {
            if s.len() < 3 {
                return Err(DataError::InvalidArgument(format!("user {} has fewer than 3 items", u)));
            }
            if let Some(&bad) = s.iter().find(|&&i| i == 0 || i >= num_items) {
                return Err(DataError::InvalidArgument(format!("user {} has item {} outside 1..{}", u, bad, num_items)));
            }
        }
        let mut users = Vocab::with_offset(0);
        for u in 0..sequences.len() {
            users.intern(&u.to_string());
        }
        let mut items = Vocab::with_offset(1);
        for i in 1..num_items {
            items.intern(&i.to_string());
        }
        Ok(SequenceDataset {
            sequences,
            num_items,
            max_len,
            users,
            items,
        })
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    /// Catalog size including the padding index.
    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn sequence(&self, user: usize) -> &[usize] {
        &self.sequences[user]
    }

    pub fn train_prefix(&self, user: usize) -> &[usize] {
        let s = &self.sequences[user];
        &s[..s.len() - 2]
    }

    pub fn valid_target(&self, user: usize) -> usize {
        let s = &self.sequences[user];
        s[s.len() - 2]
    }

    pub fn test_target(&self, user: usize) -> usize {
        *self.sequences[user].last().expect("non-empty sequence")
    }

    /// Model input history for evaluating `split`: the training prefix for
    /// validation, everything but the last item for test.
    pub fn history(&self, user: usize, split: Split) -> &[usize] {
        let s = &self.sequences[user];
        match split {
            Split::Validation => &s[..s.len() - 2],
            Split::Test => &s[..s.len() - 1],
        }
    }

    pub fn target(&self, user: usize, split: Split) -> usize {
        match split {
            Split::Validation => self.valid_target(user),
            Split::Test => self.test_target(user),
        }
    }

    pub fn users(&self) -> &Vocab {
        &self.users
    }

    pub fn items(&self) -> &Vocab {
        &self.items
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn summary(&self) -> DatasetSummary {
        let users = self.num_users();
        let items = self.num_items - 1;
        let interactions = self.num_interactions();
        DatasetSummary {
            users,
            items,
            interactions,
            density: interactions as f64 / (users as f64 * items as f64),
            avg_length: interactions as f64 / users as f64,
        }
    }

    /// Training-input rows truncated to the last `T` positions, left-padded:
    /// the sequences the encoder actually sees during training.
    pub fn training_inputs(&self) -> Vec<Vec<usize>> {
        (0..self.num_users())
            .map(|u| {
                let prefix = self.train_prefix(u);
                let inputs = &prefix[..prefix.len().saturating_sub(1)];
                let start = inputs.len().saturating_sub(self.max_len);
                super::left_pad(&inputs[start..], self.max_len)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_from(rows: &[(&str, &str, i64)]) -> InteractionLog {
        let mut log = InteractionLog::new();
        for &(u, i, t) in rows {
            log.push(u, i, t);
        }
        log
    }

    #[test]
    fn leave_one_out_split() {
        let ds = SequenceDataset::from_sequences(vec![vec![1, 2, 3, 4, 5]], 6, 10).unwrap();
        assert_eq!(ds.train_prefix(0), &[1, 2, 3]);
        assert_eq!(ds.valid_target(0), 4);
        assert_eq!(ds.test_target(0), 5);
        assert_eq!(ds.history(0, Split::Test), &[1, 2, 3, 4]);
    }

    #[test]
    fn five_interactions_at_threshold_are_kept() {
        let mut rows = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                rows.push((format!("u{}", u), format!("i{}", i), (u * 10 + i) as i64));
            }
        }
        let rows: Vec<(&str, &str, i64)> = rows.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
        let ds = build_dataset(&log_from(&rows), 5, 50).unwrap();
        assert_eq!(ds.num_users(), 5);
        assert_eq!(ds.num_items(), 6);
    }

    /// Hand-simulated: pass 1 removes item `rare` (4 events). That drops
    /// users `v` and `w` to 4 and 2 events, so pass 2 removes them; item `c`
    /// then has 4 events and goes in pass 3, which leaves `x` with 1 event
    /// for pass 4. A single pass would have kept `v`, `w` and `x`.
    #[test]
    fn filtering_runs_to_fixed_point() {
        let mut rows: Vec<(String, String, i64)> = Vec::new();
        let mut t = 0;
        let mut add = |u: &str, i: &str| {
            t += 1;
            rows.push((u.to_string(), i.to_string(), t));
        };
        for u in ["p", "q", "r", "s", "z"] {
            for i in ["a", "b", "d", "e", "f"] {
                add(u, i);
            }
        }
        for i in ["a", "b", "c", "rare", "d"] {
            add("v", i);
        }
        for i in ["rare", "rare", "rare", "a", "b"] {
            add("w", i);
        }
        for i in ["c", "c", "c", "c", "a"] {
            add("x", i);
        }
        let rows: Vec<(&str, &str, i64)> = rows.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
        let ds = build_dataset(&log_from(&rows), 5, 50).unwrap();
        let kept: Vec<&str> = (0..ds.num_users()).map(|u| ds.users().raw(u).unwrap()).collect();
        assert_eq!(kept, vec!["p", "q", "r", "s", "z"]);
        assert!(ds.items().get("c").is_none());
        assert!(ds.items().get("rare").is_none());
        assert_eq!(ds.num_items(), 6);
        for u in 0..ds.num_users() {
            assert_eq!(ds.sequence(u).len(), 5);
        }
    }

    #[test]
    fn timestamp_ties_keep_file_order() {
        let mut rows = Vec::new();
        for u in ["u", "v", "w"] {
            rows.extend([(u, "a", 5), (u, "b", 1), (u, "c", 5), (u, "d", 1), (u, "e", 3)]);
        }
        let ds = build_dataset(&log_from(&rows), 3, 10).unwrap();
        let raw: Vec<&str> = ds.sequence(0).iter().map(|&i| ds.items().raw(i).unwrap()).collect();
        assert_eq!(raw, vec!["b", "d", "e", "a", "c"]);
    }

    #[test]
    fn empty_after_filtering() {
        let rows = [("u", "a", 1), ("u", "b", 2), ("u", "c", 3)];
        assert!(matches!(build_dataset(&log_from(&rows), 5, 10), Err(DataError::EmptyDataset(5))));
    }

    #[test]
    fn argument_checks() {
        let rows = [("u", "a", 1)];
        assert!(build_dataset(&log_from(&rows), 2, 10).is_err());
        assert!(build_dataset(&log_from(&rows), 3, 1).is_err());
    }

    #[test]
    fn summary_counts() {
        let ds = SequenceDataset::from_sequences(vec![vec![1, 2, 3], vec![1, 2, 3, 1]], 4, 5).unwrap();
        let s = ds.summary();
        assert_eq!((s.users, s.items, s.interactions), (2, 3, 7));
        assert!((s.density - 7.0 / 6.0).abs() < 1e-12);
    }
}

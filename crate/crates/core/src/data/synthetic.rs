//! Seeded synthetic interaction logs for tests and desk-scale experiments.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Geometric;
use serde::{Deserialize, Serialize};

use super::InteractionLog;

/// Every user walks a fixed successor permutation over the catalog, so the
/// next item is fully determined by the current one.
pub fn planted_next_item(users: usize, items: usize, len: usize, seed: u64) -> InteractionLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successor: Vec<usize> = (0..items).collect();
    // single cycle so walks never get stuck in short loops
    let mut order: Vec<usize> = (0..items).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    for k in 0..items {
        successor[order[k]] = order[(k + 1) % items];
    }
    let mut log = InteractionLog::new();
    for u in 0..users {
        let mut item = rng.random_range(0..items);
        for step in 0..len {
            log.push(&format!("u{}", u), &format!("i{}", item), step as i64);
            item = successor[item];
        }
    }
    log
}

/// Sparse e-commerce-like logs: Zipf popularity inside topical clusters,
/// short geometric-length sessions, and item-to-item transition habits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseLogConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    /// Minimum sequence length before filtering.
    pub min_len: usize,
    /// Mean of the geometric number of events beyond `min_len`.
    pub mean_extra_len: f64,
    pub max_len: usize,
    /// Candidate next items per item.
    pub successors: usize,
    /// Probability that the next event follows a transition habit.
    pub follow_prob: f64,
    /// Zipf exponent of within-cluster popularity.
    pub zipf: f64,
    pub seed: u64,
}

impl Default for SparseLogConfig {
    fn default() -> Self {
        SparseLogConfig {
            users: 2100,
            items: 1200,
            clusters: 24,
            min_len: 5,
            mean_extra_len: 4.0,
            max_len: 60,
            successors: 3,
            follow_prob: 0.6,
            zipf: 0.8,
            seed: 7,
        }
    }
}

pub fn sparse_log(cfg: &SparseLogConfig) -> InteractionLog {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clusters = cfg.clusters.max(1);
    let members: Vec<Vec<usize>> = (0..clusters)
        .map(|c| (0..cfg.items).filter(|i| i % clusters == c).collect())
        .collect();
    let popularity: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| {
            let w: Vec<f64> = (0..m.len()).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf)).collect();
            WeightedIndex::new(w).expect("non-empty cluster")
        })
        .collect();
    // transition habits mostly stay inside the item's cluster
    let successors: Vec<Vec<usize>> = (0..cfg.items)
        .map(|i| {
            (0..cfg.successors)
                .map(|_| {
                    let c = if rng.random::<f64>() < 0.8 { i % clusters } else { rng.random_range(0..clusters) };
                    members[c][popularity[c].sample(&mut rng)]
                })
                .collect()
        })
        .collect();
    let extra = Geometric::new(1.0 / (1.0 + cfg.mean_extra_len)).expect("valid geometric");

    let mut log = InteractionLog::new();
    let mut clock: i64 = 1_300_000_000;
    for u in 0..cfg.users {
        let home = rng.random_range(0..clusters);
        let len = (cfg.min_len + extra.sample(&mut rng) as usize).min(cfg.max_len);
        let mut item = members[home][popularity[home].sample(&mut rng)];
        for _ in 0..len {
            clock += rng.random_range(1..5000);
            log.push(&format!("user{}", u), &format!("item{}", item), clock);
            item = if rng.random::<f64>() < cfg.follow_prob {
                successors[item][rng.random_range(0..successors[item].len())]
            } else {
                let c = if rng.random::<f64>() < 0.85 { home } else { rng.random_range(0..clusters) };
                members[c][popularity[c].sample(&mut rng)]
            };
        }
    }
    log
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_dataset;

    #[test]
    fn planted_rule_is_deterministic_successor() {
        let log = planted_next_item(10, 7, 6, 1);
        let ds = build_dataset(&log, 3, 10).unwrap();
        let mut next = std::collections::HashMap::new();
        for u in 0..ds.num_users() {
            for w in ds.sequence(u).windows(2) {
                assert_eq!(*next.entry(w[0]).or_insert(w[1]), w[1]);
            }
        }
    }

    #[test]
    fn sparse_log_is_seeded() {
        let cfg = SparseLogConfig {
            users: 50,
            items: 40,
            ..Default::default()
        };
        let a = sparse_log(&cfg);
        let b = sparse_log(&cfg);
        assert_eq!(a.records, b.records);
        assert!(a.len() >= 50 * cfg.min_len);
    }
}

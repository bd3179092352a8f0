//! Full-catalog leave-one-out ranking metrics and item-replacement attacks.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{SequenceDataset, Split, PAD};
use crate::models::{ForwardCtx, ModelError, SeqRecModel, PROB_EPS};
use crate::numerics::{matmul_nt, NumericsError, Scalar, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("K must be at least 1 (got {0})")]
    BadK(usize),
    #[error("rank must be at least 1")]
    BadRank,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{0}")]
    Invalid(String),
}

pub fn hit_at_k(rank: usize, k: usize) -> Result<Scalar, EvalError> {
    check(rank, k)?;
    Ok(if rank <= k { 1.0 } else { 0.0 })
}

pub fn ndcg_at_k(rank: usize, k: usize) -> Result<Scalar, EvalError> {
    check(rank, k)?;
    Ok(if rank <= k { 1.0 / ((rank + 1) as Scalar).log2() } else { 0.0 })
}

fn check(rank: usize, k: usize) -> Result<(), EvalError> {
    if k < 1 {
        return Err(EvalError::BadK(k));
    }
    if rank < 1 {
        return Err(EvalError::BadRank);
    }
    Ok(())
}

/// 1-based rank of `target` among all items except padding and `history`
/// (the target itself always competes). Ties go to the lower index.
pub fn rank_target(scores: &[Scalar], history: &[usize], target: usize) -> usize {
    let mut excluded = vec![false; scores.len()];
    excluded[PAD] = true;
    for &h in history {
        excluded[h] = true;
    }
    excluded[target] = false;
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| !excluded[i] && (s > st || (s == st && i < target)))
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub users: usize,
    pub ndcg: Scalar,
    pub hit: Scalar,
    pub ranks: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

impl MetricsReport {
    pub fn from_ranks(ranks: Vec<usize>, k: usize) -> Result<Self, EvalError> {
        let n = ranks.len().max(1) as Scalar;
        let mut ndcg = 0.0;
        let mut hit = 0.0;
        for &r in &ranks {
            ndcg += ndcg_at_k(r, k)?;
            hit += hit_at_k(r, k)?;
        }
        Ok(MetricsReport {
            k,
            users: ranks.len(),
            ndcg: ndcg / n,
            hit: hit / n,
            ranks,
            fingerprint: None,
        })
    }

    pub fn per_user_ndcg(&self) -> Vec<Scalar> {
        self.ranks.iter().map(|&r| ndcg_at_k(r, self.k).expect("valid rank")).collect()
    }
}

const CHUNK: usize = 256;

/// Ranks each target against the full catalog given its history.
pub fn rank_histories(model: &SeqRecModel, histories: &[&[usize]], targets: &[usize]) -> Result<Vec<usize>, EvalError> {
    assert_eq!(histories.len(), targets.len());
    let mut ranks = Vec::with_capacity(targets.len());
    for (hs, ts) in histories.chunks(CHUNK).zip(targets.chunks(CHUNK)) {
        let w = model.user_embeddings(hs)?;
        let scores = matmul_nt(&w, model.output_embeddings())?;
        for (u, (h, &t)) in hs.iter().zip(ts).enumerate() {
            ranks.push(rank_target(scores.row(u), h, t));
        }
    }
    Ok(ranks)
}

/// Metrics over every user for the given split.
pub fn evaluate(model: &SeqRecModel, dataset: &SequenceDataset, split: Split, k: usize) -> Result<MetricsReport, EvalError> {
    let users: Vec<usize> = (0..dataset.num_users()).collect();
    evaluate_users(model, dataset, split, k, &users)
}

pub fn evaluate_users(
    model: &SeqRecModel,
    dataset: &SequenceDataset,
    split: Split,
    k: usize,
    users: &[usize],
) -> Result<MetricsReport, EvalError> {
    let histories: Vec<&[usize]> = users.iter().map(|&u| dataset.history(u, split)).collect();
    let targets: Vec<usize> = users.iter().map(|&u| dataset.target(u, split)).collect();
    MetricsReport::from_ranks(rank_histories(model, &histories, &targets)?, k)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackPosition {
    First,
    Middle,
    Last,
    /// The last `K` items, replaced one at a time from the end.
    LastK(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub position: AttackPosition,
    pub epsilon: Scalar,
    /// Also refuse replacements already in the user's history.
    pub strict_exclusion: bool,
    /// Users whose visible history is shorter are skipped.
    pub min_history: usize,
}

impl AttackSpec {
    pub fn new(position: AttackPosition, epsilon: Scalar) -> Self {
        AttackSpec {
            position,
            epsilon,
            strict_exclusion: false,
            min_history: match position {
                AttackPosition::LastK(k) => k.max(1),
                _ => 1,
            },
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    pub item: usize,
    /// The attack gradient vanished and the nearest neighbour was used.
    pub fallback: bool,
}

/// Index into `history` of the attacked position, counted over the part of
/// the history the model can see (its last `max_len` items).
pub fn attack_index(history_len: usize, max_len: usize, position: AttackPosition) -> Option<usize> {
    let visible = history_len.min(max_len);
    if visible == 0 {
        return None;
    }
    let start = history_len - visible;
    match position {
        AttackPosition::First => Some(start),
        AttackPosition::Middle => Some(start + visible.div_ceil(2) - 1),
        AttackPosition::Last => Some(history_len - 1),
        AttackPosition::LastK(k) => (k >= 1 && k <= visible).then(|| history_len - k),
    }
}

/// Gradient-guided replacement for one position per history, batched.
/// `positions[u]` indexes `histories[u]`.
pub fn craft_replacements(
    model: &SeqRecModel,
    histories: &[Vec<usize>],
    targets: &[usize],
    positions: &[usize],
    epsilon: Scalar,
    strict_exclusion: bool,
) -> Result<Vec<Replacement>, EvalError> {
    if epsilon < 0.0 {
        return Err(EvalError::Invalid(format!("attack epsilon must be non-negative (got {})", epsilon)));
    }
    let d = model.config().dim;
    let t = model.config().max_len;
    let table = model.item_embeddings();
    let mut out = Vec::with_capacity(histories.len());
    for ((hs, ts), ps) in histories.chunks(CHUNK).zip(targets.chunks(CHUNK)).zip(positions.chunks(CHUNK)) {
        let refs: Vec<&[usize]> = hs.iter().map(Vec::as_slice).collect();
        let (ids, layout) = model.pad_histories(&refs);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false)?;
        let s = tape.leaf(model.embed_values(&ids, &layout))?;
        let w = model.encode(&mut tape, &bound, s, &layout, ForwardCtx::eval())?;
        let last = tape.select1(w, layout.width - 1)?;
        let r = model.score_rows(&mut tape, &bound, last, ts)?;
        let p = tape.sigmoid(r)?;
        let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
        let lp = tape.ln(p)?;
        let total = tape.sum(lp)?;
        let loss = tape.scale(total, -1.0)?;
        let grads = tape.backward(loss)?;
        let g = grads.get(s)?;
        for (u, (h, &pos)) in hs.iter().zip(ps).enumerate() {
            let visible = h.len().min(t);
            if pos + visible < h.len() || pos >= h.len() {
                return Err(EvalError::Invalid(format!("position {} outside the visible history", pos)));
            }
            // column of history[pos] in the padded, trimmed layout
            let col = (t - visible) + (pos - (h.len() - visible)) - layout.offset;
            let gu = &g.data()[(u * layout.width + col) * d..(u * layout.width + col + 1) * d];
            let norm = gu.iter().map(|x| x * x).sum::<Scalar>().sqrt();
            let orig = h[pos];
            let fallback = norm <= crate::numerics::ZERO_NORM_THRESHOLD;
            let stepped: Vec<Scalar> = table
                .row(orig)
                .iter()
                .zip(gu)
                .map(|(e, gi)| if fallback { *e } else { e + epsilon * gi / norm })
                .collect();
            let item = nearest_item(table, &stepped, orig, if strict_exclusion { h } else { &[] });
            out.push(Replacement { item, fallback });
        }
    }
    Ok(out)
}

/// Single-history convenience wrapper.
pub fn craft_replacement(
    model: &SeqRecModel,
    history: &[usize],
    position: usize,
    target: usize,
    epsilon: Scalar,
    strict_exclusion: bool,
) -> Result<Replacement, EvalError> {
    Ok(craft_replacements(model, &[history.to_vec()], &[target], &[position], epsilon, strict_exclusion)?[0])
}

/// Closest catalog row to `point`, skipping padding, `original` and `banned`.
pub fn nearest_item(table: &Tensor, point: &[Scalar], original: usize, banned: &[usize]) -> usize {
    let mut best = (Scalar::INFINITY, PAD);
    for v in 1..table.shape()[0] {
        if v == original || banned.contains(&v) {
            continue;
        }
        let dist: Scalar = table.row(v).iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best.0 {
            best = (dist, v);
        }
    }
    best.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub spec: AttackSpec,
    pub k: usize,
    pub users: usize,
    pub skipped: usize,
    pub fallbacks: usize,
    pub clean: MetricsReport,
    pub attacked: MetricsReport,
    pub ndcg_drop: Scalar,
    pub hit_drop: Scalar,
    pub ndcg_drop_pct: Scalar,
    pub hit_drop_pct: Scalar,
}

fn pct(clean: Scalar, attacked: Scalar) -> Scalar {
    if clean > 0.0 {
        100.0 * (clean - attacked) / clean
    } else {
        0.0
    }
}

/// Test-split users whose visible history has at least `min_history` items.
pub fn eligible_users(dataset: &SequenceDataset, min_history: usize) -> (Vec<usize>, usize) {
    let t = dataset.max_len();
    let (ok, skipped): (Vec<usize>, Vec<usize>) = (0..dataset.num_users())
        .partition(|&u| dataset.history(u, Split::Test).len().min(t) >= min_history.max(1));
    (ok, skipped.len())
}

/// Attacked histories after replacing the positions the spec names, last-K
/// replacements crafted one at a time against the already-modified history.
pub fn attacked_histories(
    model: &SeqRecModel,
    dataset: &SequenceDataset,
    users: &[usize],
    spec: &AttackSpec,
) -> Result<(Vec<Vec<usize>>, usize), EvalError> {
    let t = model.config().max_len;
    let mut histories: Vec<Vec<usize>> = users.iter().map(|&u| dataset.history(u, Split::Test).to_vec()).collect();
    let targets: Vec<usize> = users.iter().map(|&u| dataset.test_target(u)).collect();
    let rounds: Vec<AttackPosition> = match spec.position {
        AttackPosition::LastK(k) => (1..=k).map(AttackPosition::LastK).collect(),
        p => vec![p],
    };
    let mut fallbacks = 0;
    for pos in rounds {
        let idx: Vec<usize> = histories
            .iter()
            .map(|h| attack_index(h.len(), t, pos).ok_or_else(|| EvalError::Invalid("history too short for attack".into())))
            .collect::<Result<_, _>>()?;
        let reps = craft_replacements(model, &histories, &targets, &idx, spec.epsilon, spec.strict_exclusion)?;
        for ((h, &i), r) in histories.iter_mut().zip(&idx).zip(&reps) {
            h[i] = r.item;
            fallbacks += r.fallback as usize;
        }
    }
    Ok((histories, fallbacks))
}

pub fn robustness_eval(model: &SeqRecModel, dataset: &SequenceDataset, spec: &AttackSpec, k: usize) -> Result<RobustnessReport, EvalError> {
    let needed = match spec.position {
        AttackPosition::LastK(kk) => kk.max(spec.min_history),
        _ => spec.min_history,
    };
    let (users, skipped) = eligible_users(dataset, needed);
    let clean = evaluate_users(model, dataset, Split::Test, k, &users)?;
    let (attacked, fallbacks) = if spec.position == AttackPosition::LastK(0) {
        (clean.clone(), 0)
    } else {
        let (histories, fallbacks) = attacked_histories(model, dataset, &users, spec)?;
        (score_attacked(model, dataset, &users, &histories, k)?, fallbacks)
    };
    Ok(RobustnessReport {
        spec: spec.clone(),
        k,
        users: users.len(),
        skipped,
        fallbacks,
        ndcg_drop: clean.ndcg - attacked.ndcg,
        hit_drop: clean.hit - attacked.hit,
        ndcg_drop_pct: pct(clean.ndcg, attacked.ndcg),
        hit_drop_pct: pct(clean.hit, attacked.hit),
        clean,
        attacked,
    })
}

fn score_attacked(
    model: &SeqRecModel,
    dataset: &SequenceDataset,
    users: &[usize],
    histories: &[Vec<usize>],
    k: usize,
) -> Result<MetricsReport, EvalError> {
    let refs: Vec<&[usize]> = histories.iter().map(Vec::as_slice).collect();
    let targets: Vec<usize> = users.iter().map(|&u| dataset.test_target(u)).collect();
    MetricsReport::from_ranks(rank_histories(model, &refs, &targets)?, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub replaced: usize,
    pub ndcg: Scalar,
    pub hit: Scalar,
    pub ranks: Vec<usize>,
}

/// Metrics after replacing the last `0..=max_k` items, over one common set
/// of users whose visible history holds at least `min_history` items.
pub fn last_k_curve(
    model: &SeqRecModel,
    dataset: &SequenceDataset,
    max_k: usize,
    epsilon: Scalar,
    k: usize,
    min_history: usize,
) -> Result<Vec<CurvePoint>, EvalError> {
    let (users, _) = eligible_users(dataset, min_history.max(max_k));
    let t = model.config().max_len;
    let mut histories: Vec<Vec<usize>> = users.iter().map(|&u| dataset.history(u, Split::Test).to_vec()).collect();
    let targets: Vec<usize> = users.iter().map(|&u| dataset.test_target(u)).collect();
    let clean = evaluate_users(model, dataset, Split::Test, k, &users)?;
    let mut curve = vec![CurvePoint {
        replaced: 0,
        ndcg: clean.ndcg,
        hit: clean.hit,
        ranks: clean.ranks,
    }];
    for kk in 1..=max_k {
        let idx: Vec<usize> = histories
            .iter()
            .map(|h| attack_index(h.len(), t, AttackPosition::LastK(kk)).expect("eligible users are long enough"))
            .collect();
        let reps = craft_replacements(model, &histories, &targets, &idx, epsilon, false)?;
        for ((h, &i), r) in histories.iter_mut().zip(&idx).zip(&reps) {
            h[i] = r.item;
        }
        let m = score_attacked(model, dataset, &users, &histories, k)?;
        curve.push(CurvePoint {
            replaced: kk,
            ndcg: m.ndcg,
            hit: m.hit,
            ranks: m.ranks,
        });
    }
    Ok(curve)
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "replaced,ndcg,hit")?;
    for p in curve {
        writeln!(out, "{},{},{}", p.replaced, p.ndcg, p.hit)?;
    }
    Ok(())
}

pub fn write_robustness_csv<W: Write>(reports: &[RobustnessReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "position,users,skipped,clean_ndcg,attacked_ndcg,ndcg_drop,ndcg_drop_pct,clean_hit,attacked_hit,hit_drop,hit_drop_pct")?;
    for r in reports {
        let pos = match r.spec.position {
            AttackPosition::First => "first".to_string(),
            AttackPosition::Middle => "middle".to_string(),
            AttackPosition::Last => "last".to_string(),
            AttackPosition::LastK(k) => format!("last_{}", k),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            pos,
            r.users,
            r.skipped,
            r.clean.ndcg,
            r.attacked.ndcg,
            r.ndcg_drop,
            r.ndcg_drop_pct,
            r.clean.hit,
            r.attacked.hit,
            r.hit_drop,
            r.hit_drop_pct
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub n: usize,
    pub mean_diff: Scalar,
    pub t: Scalar,
    /// P(T >= t) under the null of zero mean difference.
    pub p_greater: Scalar,
}

/// One-sided paired t-test of `mean(a - b) > 0`.
pub fn paired_t_test(a: &[Scalar], b: &[Scalar]) -> Result<PairedTTest, EvalError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(EvalError::Invalid(format!("paired test needs two equal samples of size >= 2 ({} vs {})", a.len(), b.len())));
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y) as f64).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let (t, p) = if se == 0.0 {
        let t = if mean > 0.0 { f64::INFINITY } else if mean < 0.0 { f64::NEG_INFINITY } else { 0.0 };
        (t, if mean > 0.0 { 0.0 } else if mean < 0.0 { 1.0 } else { 0.5 })
    } else {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| EvalError::Invalid(e.to_string()))?;
        (t, 1.0 - dist.cdf(t))
    };
    Ok(PairedTTest {
        n,
        mean_diff: mean as Scalar,
        t: t as Scalar,
        p_greater: p as Scalar,
    })
}

//! Cascade effects of each training interaction and the perturbation scales
//! derived from them.
//!
//! Position `t` runs `1..=T` over the left-padded training inputs, so the
//! most recent item always sits at `t = T`:
//!
//! ```text
//! C(i, t) = 1 + T - t + (b / m) * sum_{k != i} sum_{l <= T} (1 + T - l) [v_i^t == v_k^l]
//! ```

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{SequenceDataset, PAD};
use crate::numerics::Scalar;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CascadeVariant {
    /// Both terms.
    #[default]
    Full,
    /// `1 + T - t` only.
    SameSequenceOnly,
    /// `1 + (b / m) * cross` only.
    CrossSequenceOnly,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide `C` by its mean over real positions, then `scale = 1 / C'`.
    #[default]
    MeanOne,
    /// `scale = (1 / C) / mean(1 / C)`, so the scales average to one.
    MeanReciprocalOne,
    /// `scale = 1 / C`.
    None,
}

/// Raw and normalized cascade values over an `m x T` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeMatrix {
    pub users: usize,
    pub max_len: usize,
    pub batch_size: usize,
    pub variant: CascadeVariant,
    pub normalization: Normalization,
    /// Item at each cell, `PAD` where unused.
    pub items: Vec<usize>,
    pub raw: Vec<Scalar>,
    pub normalized: Vec<Scalar>,
    pub scale: Vec<Scalar>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeSummary {
    pub real_positions: usize,
    pub raw_min: Scalar,
    pub raw_max: Scalar,
    pub raw_mean: Scalar,
    pub scale_min: Scalar,
    pub scale_max: Scalar,
    pub scale_mean: Scalar,
}

fn recency(t: usize, max_len: usize) -> u64 {
    (1 + max_len - t) as u64
}

/// Direct double loop over every other user and position.
pub fn cascade_value_reference(rows: &[Vec<usize>], user: usize, t: usize, batch_size: usize) -> Scalar {
    let max_len = rows[user].len();
    let item = rows[user][t - 1];
    assert_ne!(item, PAD, "position {} of user {} is padding", t, user);
    let mut cross: u64 = 0;
    for (k, row) in rows.iter().enumerate() {
        if k == user {
            continue;
        }
        for (l0, &v) in row.iter().enumerate() {
            if v == item {
                cross += recency(l0 + 1, max_len);
            }
        }
    }
    exact(recency(t, max_len), cross, batch_size, rows.len())
}

/// `same + (b / m) * cross` as one rounding of an integer ratio, so equal
/// cascades are bitwise equal whatever their decomposition.
fn exact(same: u64, cross: u64, batch_size: usize, users: usize) -> Scalar {
    let m = users as u64;
    (same * m + batch_size as u64 * cross) as Scalar / m as Scalar
}

/// Two passes over the grid: per-item totals, then each cell's total minus
/// its own user's contribution.
pub fn compute_cascade_rows(rows: &[Vec<usize>], batch_size: usize, variant: CascadeVariant) -> CascadeMatrix {
    let m = rows.len();
    let max_len = rows.first().map_or(0, Vec::len);
    assert!(rows.iter().all(|r| r.len() == max_len), "rows must share one width");
    let mut totals: HashMap<usize, u64> = HashMap::new();
    for row in rows {
        for (t0, &v) in row.iter().enumerate() {
            if v != PAD {
                *totals.entry(v).or_default() += recency(t0 + 1, max_len);
            }
        }
    }
    let mut raw = Vec::with_capacity(m * max_len);
    let mut own: HashMap<usize, u64> = HashMap::new();
    for row in rows {
        own.clear();
        for (t0, &v) in row.iter().enumerate() {
            if v != PAD {
                *own.entry(v).or_default() += recency(t0 + 1, max_len);
            }
        }
        for (t0, &v) in row.iter().enumerate() {
            if v == PAD {
                raw.push(0.0);
                continue;
            }
            let cross = totals[&v] - own[&v];
            let same = recency(t0 + 1, max_len);
            raw.push(match variant {
                CascadeVariant::Full => exact(same, cross, batch_size, m),
                CascadeVariant::SameSequenceOnly => same as Scalar,
                CascadeVariant::CrossSequenceOnly => exact(1, cross, batch_size, m),
            });
        }
    }
    CascadeMatrix {
        users: m,
        max_len,
        batch_size,
        variant,
        normalization: Normalization::None,
        items: rows.iter().flatten().copied().collect(),
        normalized: raw.clone(),
        scale: raw.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect(),
        raw,
    }
}

/// Cascade matrix over the dataset's training inputs, normalized.
pub fn compute_cascade_matrix(
    dataset: &SequenceDataset,
    batch_size: usize,
    variant: CascadeVariant,
    normalization: Normalization,
) -> CascadeMatrix {
    compute_cascade_rows(&dataset.training_inputs(), batch_size, variant).normalize(normalization)
}

impl CascadeMatrix {
    pub fn is_real(&self, cell: usize) -> bool {
        self.items[cell] != PAD
    }

    fn real_values<'a>(&'a self, values: &'a [Scalar]) -> impl Iterator<Item = Scalar> + 'a {
        values.iter().zip(&self.items).filter(|(_, &i)| i != PAD).map(|(&v, _)| v)
    }

    fn real_mean(&self, values: &[Scalar]) -> Scalar {
        let (sum, n) = self.real_values(values).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            1.0
        } else {
            sum / n as Scalar
        }
    }

    /// Recomputes `normalized` and `scale` from `raw`. Padding cells keep
    /// scale 0.
    pub fn normalize(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        let real: Vec<bool> = self.items.iter().map(|&i| i != PAD).collect();
        match normalization {
            Normalization::MeanOne => {
                let mean = self.real_mean(&self.raw);
                self.normalized = self.raw.iter().map(|&c| c / mean).collect();
                self.scale = self.normalized.iter().map(|&c| 1.0 / c).collect();
            }
            Normalization::MeanReciprocalOne => {
                let inv: Vec<Scalar> = self.raw.iter().map(|&c| 1.0 / c).collect();
                let mean = self.real_mean(&inv);
                self.scale = inv.iter().map(|&s| s / mean).collect();
                self.normalized = self.scale.iter().map(|&s| 1.0 / s).collect();
            }
            Normalization::None => {
                self.normalized = self.raw.clone();
                self.scale = self.raw.iter().map(|&c| 1.0 / c).collect();
            }
        }
        for ((n, s), r) in self.normalized.iter_mut().zip(self.scale.iter_mut()).zip(real) {
            if !r {
                *n = 0.0;
                *s = 0.0;
            }
        }
        self
    }

    pub fn raw_at(&self, user: usize, t: usize) -> Scalar {
        self.raw[user * self.max_len + t - 1]
    }

    pub fn scale_at(&self, user: usize, t: usize) -> Scalar {
        self.scale[user * self.max_len + t - 1]
    }

    /// Scales for a batch whose column `j` is position `offset + j + 1`.
    pub fn batch_scales(&self, users: &[usize], width: usize, offset: usize) -> Vec<Scalar> {
        let mut out = Vec::with_capacity(users.len() * width);
        for &u in users {
            let start = u * self.max_len + offset;
            out.extend_from_slice(&self.scale[start..start + width]);
        }
        out
    }

    pub fn summary(&self) -> CascadeSummary {
        let stats = |v: &[Scalar]| {
            let (mut lo, mut hi) = (Scalar::INFINITY, Scalar::NEG_INFINITY);
            for x in self.real_values(v) {
                lo = lo.min(x);
                hi = hi.max(x);
            }
            (lo, hi, self.real_mean(v))
        };
        let (raw_min, raw_max, raw_mean) = stats(&self.raw);
        let (scale_min, scale_max, scale_mean) = stats(&self.scale);
        CascadeSummary {
            real_positions: self.items.iter().filter(|&&i| i != PAD).count(),
            raw_min,
            raw_max,
            raw_mean,
            scale_min,
            scale_max,
            scale_mean,
        }
    }

    /// One row per real cell: `user,position,item,raw,normalized,scale`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "user,position,item,raw,normalized,scale")?;
        for u in 0..self.users {
            for t in 1..=self.max_len {
                let c = u * self.max_len + t - 1;
                if self.is_real(c) {
                    writeln!(out, "{},{},{},{},{},{}", u, t, self.items[c], self.raw[c], self.normalized[c], self.scale[c])?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;

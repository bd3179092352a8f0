#![allow(dead_code)]

use cascade_rec::data::SequenceDataset;
use cascade_rec::models::SeqRecModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central differences of `loss` with respect to every parameter entry.
pub struct FdCheck {
    pub max_rel: f64,
    pub checked: usize,
    /// Entries that match at no step and whose one-sided slopes disagree
    /// (a ReLU or clamp kink inside every window).
    pub kinks: usize,
    pub worst: String,
}

/// `|a - f| / max(|a|, |f|, floor)`.
pub fn rel_err(a: f64, f: f64, floor: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(floor)
}

pub fn fd_check(model: &SeqRecModel, analytic: &[Vec<f64>], loss: impl Fn(&SeqRecModel) -> f64, h: f64, floor: f64) -> FdCheck {
    let mut probe = model.clone();
    let f0 = loss(model);
    let mut out = FdCheck {
        max_rel: 0.0,
        checked: 0,
        kinks: 0,
        worst: String::new(),
    };
    for p in 0..model.params().len() {
        for j in 0..model.params().get(p).value.len() {
            let x = model.params().get(p).value.data()[j];
            // central differences at h, h/10, h/100, h/1000; the closest one
            // counts. Small steps move a nearby ReLU kink out of the window and
            // cut the O(h^2) error of tiny gradients under large curvature,
            // large steps keep rounding noise down; a wrong gradient
            // disagrees at every step.
            let a = analytic[p][j];
            let mut best = (f64::INFINITY, 0.0, 0.0, h);
            let mut step = h;
            for _ in 0..4 {
                probe.params_mut().get_mut(p).value.data_mut()[j] = x + step;
                let fp = loss(&probe);
                probe.params_mut().get_mut(p).value.data_mut()[j] = x - step;
                let fm = loss(&probe);
                let fd = (fp - fm) / (2.0 * step);
                let spread = ((fp - f0) / step - (f0 - fm) / step).abs();
                let e = rel_err(a, fd, floor);
                if e < best.0 {
                    best = (e, fd, spread, step);
                }
                if e < 1e-5 {
                    break;
                }
                step /= 10.0;
            }
            probe.params_mut().get_mut(p).value.data_mut()[j] = x;
            let (e, fd, spread, step) = best;
            if e >= 1e-4 && spread > 1e-2 * fd.abs().max(1.0) {
                out.kinks += 1;
                continue;
            }
            out.checked += 1;
            if e > out.max_rel {
                out.max_rel = e;
                out.worst = format!("{}[{}]: autodiff {:e} vs fd {:e} (h {:e})", model.params().get(p).name, j, a, fd, step);
            }
        }
    }
    out
}

/// `users` random sequences over items `1..n`, lengths `3..=max_seq`.
pub fn random_dataset(users: usize, n: usize, t: usize, max_seq: usize, seed: u64) -> SequenceDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs = (0..users)
        .map(|_| (0..rng.random_range(3..=max_seq)).map(|_| rng.random_range(1..n)).collect())
        .collect();
    SequenceDataset::from_sequences(seqs, n, t).unwrap()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

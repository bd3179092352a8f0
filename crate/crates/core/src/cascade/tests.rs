use proptest::prelude::*;

use super::*;
use crate::data::left_pad;

fn rows(seqs: &[&[usize]], t: usize) -> Vec<Vec<usize>> {
    seqs.iter().map(|s| left_pad(s, t)).collect()
}

#[test]
fn boundary_values() {
    // unique item at t = T, and at t = 1 with T = 5
    let r = rows(&[&[1, 2, 3, 4, 5], &[6, 7, 8, 9, 10]], 5);
    let c = compute_cascade_rows(&r, 2, CascadeVariant::Full);
    assert_eq!(c.raw_at(0, 5), 1.0);
    assert_eq!(c.raw_at(0, 1), 5.0);
    assert_eq!(cascade_value_reference(&r, 0, 5, 2), 1.0);
    assert_eq!(cascade_value_reference(&r, 0, 1, 2), 5.0);
}

#[test]
fn single_user_has_no_cross_terms() {
    let r = rows(&[&[3, 1, 3, 2]], 6);
    let c = compute_cascade_rows(&r, 1, CascadeVariant::Full);
    for t in 3..=6 {
        assert_eq!(c.raw_at(0, t), (1 + 6 - t) as Scalar);
    }
    assert_eq!(c.raw_at(0, 1), 0.0);
}

#[test]
fn two_user_hand_example() {
    let r = vec![vec![9, 1, 2], vec![3, 4, 9]];
    let c = compute_cascade_rows(&r, 2, CascadeVariant::Full);
    assert_eq!(c.raw_at(0, 1), 4.0);
    assert_eq!(c.raw_at(1, 3), 4.0);
}

/// The worked example's interaction reaches itself plus ten later
/// interactions; with `b = m` every reached interaction counts once.
#[test]
fn cascade_set_of_eleven() {
    let x = 50;
    let r = vec![
        vec![1, 2, x, 3, 4],
        vec![5, x, 6, 7, 8],
        vec![9, 10, 11, x, 12],
        vec![13, 14, 15, x, 16],
    ];
    let t = 5;
    // enumerate the affected set explicitly
    let mut reached = std::collections::BTreeSet::new();
    for l in 3..=t {
        reached.insert((0, l));
    }
    for (k, row) in r.iter().enumerate().skip(1) {
        for l in 1..=t {
            if row[l - 1] == x {
                for later in l..=t {
                    reached.insert((k, later));
                }
            }
        }
    }
    assert_eq!(reached.len(), 11);
    let c = compute_cascade_rows(&r, 4, CascadeVariant::Full);
    assert_eq!(c.raw_at(0, 3), 11.0);
}

#[test]
fn own_duplicates_are_excluded_from_the_cross_term() {
    let r = vec![vec![7, 2, 7], vec![1, 7, 3]];
    let c = compute_cascade_rows(&r, 2, CascadeVariant::Full);
    // user 0's own repeat of item 7 is not a cross-sequence hit
    assert_eq!(c.raw_at(0, 1), 3.0 + 2.0);
    assert_eq!(c.raw_at(0, 3), 1.0 + 2.0);
    assert_eq!(c.raw_at(1, 2), 2.0 + (3.0 + 1.0));
    assert_eq!(c.raw_at(0, 1), cascade_value_reference(&r, 0, 1, 2));
}

#[test]
fn constant_matrix_normalizes_to_one() {
    let r = rows(&[&[1, 2], &[3, 4]], 3);
    let mut c = compute_cascade_rows(&r, 2, CascadeVariant::Full);
    for (v, &i) in c.raw.iter_mut().zip(&c.items) {
        if i != PAD {
            *v = 7.0;
        }
    }
    let n = c.normalize(Normalization::MeanOne);
    for cell in 0..n.items.len() {
        if n.is_real(cell) {
            assert_eq!((n.normalized[cell], n.scale[cell]), (1.0, 1.0));
        } else {
            assert_eq!(n.scale[cell], 0.0);
        }
    }
}

#[test]
fn two_value_normalization() {
    let r = vec![vec![1, 2]];
    let mut c = compute_cascade_rows(&r, 1, CascadeVariant::Full);
    c.raw = vec![2.0, 4.0];
    let n = c.normalize(Normalization::MeanOne);
    assert!((n.normalized[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((n.normalized[1] - 4.0 / 3.0).abs() < 1e-15);
    assert!((n.scale[0] - 1.5).abs() < 1e-15);
    assert!((n.scale[1] - 0.75).abs() < 1e-15);

    let alt = n.clone().normalize(Normalization::MeanReciprocalOne);
    assert!(((alt.scale[0] + alt.scale[1]) / 2.0 - 1.0).abs() < 1e-15);
    assert!(alt.scale[0] > alt.scale[1]);
    let none = n.normalize(Normalization::None);
    assert_eq!(none.scale, vec![0.5, 0.25]);
}

#[test]
fn variants_on_edge_cases() {
    let r = rows(&[&[1, 2, 3], &[4, 5, 6]], 50);
    let same = compute_cascade_rows(&r, 2, CascadeVariant::SameSequenceOnly);
    assert_eq!(same.raw_at(0, 50), 1.0);
    let cross = compute_cascade_rows(&r, 2, CascadeVariant::CrossSequenceOnly).normalize(Normalization::MeanOne);
    for cell in 0..cross.items.len() {
        if cross.is_real(cell) {
            assert_eq!((cross.raw[cell], cross.scale[cell]), (1.0, 1.0));
        }
    }
}

#[test]
fn batch_scales_follow_the_offset() {
    let r = rows(&[&[1, 2, 3], &[4, 5]], 4);
    let c = compute_cascade_rows(&r, 2, CascadeVariant::SameSequenceOnly).normalize(Normalization::None);
    let s = c.batch_scales(&[1, 0], 3, 1);
    assert_eq!(s, vec![0.0, 0.5, 1.0, 1.0 / 3.0, 0.5, 1.0]);
}

#[test]
fn csv_lists_real_cells() {
    let r = rows(&[&[1, 2]], 3);
    let c = compute_cascade_rows(&r, 1, CascadeVariant::Full).normalize(Normalization::MeanOne);
    let mut out = Vec::new();
    c.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("0,2,1,2,"));
}

#[test]
fn dataset_entry_point_uses_training_inputs() {
    let ds = SequenceDataset::from_sequences(vec![vec![1, 2, 3, 4, 5], vec![2, 3, 1]], 6, 4).unwrap();
    let c = compute_cascade_matrix(&ds, 2, CascadeVariant::Full, Normalization::MeanOne);
    assert_eq!(c.items, vec![0, 0, 1, 2, 0, 0, 0, 0]);
    assert!((c.summary().raw_mean / c.summary().raw_mean - 1.0).abs() < 1e-15);
}

fn random_rows() -> impl Strategy<Value = (Vec<Vec<usize>>, usize)> {
    (1usize..=10, 1usize..=30, 2usize..=12, 1usize..=64).prop_flat_map(|(t, m, n, b)| {
        let row = (0usize..=t, prop::collection::vec(1..n, t)).prop_map(move |(len, items)| left_pad(&items[..len], t));
        (prop::collection::vec(row, m), Just(b))
    })
}

proptest! {
    #[test]
    fn matches_brute_force_exactly((r, b) in random_rows()) {
        let c = compute_cascade_rows(&r, b, CascadeVariant::Full);
        for u in 0..r.len() {
            for t in 1..=r[0].len() {
                if r[u][t - 1] != PAD {
                    let oracle = cascade_value_reference(&r, u, t, b);
                    prop_assert_eq!(c.raw_at(u, t).to_bits(), oracle.to_bits());
                    prop_assert!(c.raw_at(u, t) >= 1.0);
                }
            }
        }
    }

    #[test]
    fn full_is_same_plus_cross_minus_one((r, b) in random_rows()) {
        let full = compute_cascade_rows(&r, b, CascadeVariant::Full);
        let same = compute_cascade_rows(&r, b, CascadeVariant::SameSequenceOnly);
        let cross = compute_cascade_rows(&r, b, CascadeVariant::CrossSequenceOnly);
        for c in 0..full.raw.len() {
            if full.is_real(c) {
                let lhs = full.raw[c];
                let rhs = same.raw[c] + cross.raw[c] - 1.0;
                prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs());
            }
        }
    }

    #[test]
    fn normalized_mean_is_one_and_scales_are_ordered((r, b) in random_rows()) {
        let c = compute_cascade_rows(&r, b, CascadeVariant::Full).normalize(Normalization::MeanOne);
        let real: Vec<usize> = (0..c.raw.len()).filter(|&i| c.is_real(i)).collect();
        prop_assume!(!real.is_empty());
        let mean = real.iter().map(|&i| c.normalized[i]).sum::<Scalar>() / real.len() as Scalar;
        prop_assert!((mean - 1.0).abs() < 1e-9);
        for &a in &real {
            prop_assert!(c.scale[a].is_finite() && c.scale[a] > 0.0);
            for &z in &real {
                if c.raw[a] < c.raw[z] {
                    prop_assert!(c.scale[a] > c.scale[z], "raw {:e} {:e} scale {:e} {:e}", c.raw[a], c.raw[z], c.scale[a], c.scale[z]);
                }
            }
        }
    }

    #[test]
    fn unique_items_decrease_along_the_sequence(t in 2usize..12, len in 2usize..12) {
        let len = len.min(t);
        let items: Vec<usize> = (1..=len).collect();
        let others: Vec<usize> = (100..100 + len).collect();
        let r = vec![left_pad(&items, t), left_pad(&others, t)];
        let c = compute_cascade_rows(&r, 2, CascadeVariant::Full);
        for p in (t - len + 1)..t {
            prop_assert!(c.raw_at(0, p) > c.raw_at(0, p + 1));
        }
    }
}

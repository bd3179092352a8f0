use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>;

fn eval(build: &Build, inputs: &[Tensor]) -> Scalar {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.value(loss).item()
}

/// Max relative error between autodiff and central differences over every
/// input coordinate.
fn grad_check(build: &Build, inputs: &[Tensor], step: Scalar) -> Scalar {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: Scalar = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).unwrap();
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * step);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn gather_selects_row() {
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let row = tape.gather(e, &[1]).unwrap();
    assert_eq!(tape.value(row).data(), &[3.0, 4.0]);
}

#[test]
fn gather_out_of_range_is_lookup_error() {
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
    assert!(matches!(tape.gather(e, &[2]), Err(NumericsError::IndexOutOfRange { .. })));
}

#[test]
fn sigmoid_and_softmax_basics() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.0)).unwrap();
    let s = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(s).item(), 0.5);
    let z = tape.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
    let p = tape.softmax(z).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
}

#[test]
fn shape_mismatch_names_operation() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{}", err);
    let c = tape.constant(Tensor::zeros(&[3])).unwrap();
    assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
}

#[test]
fn product_rule() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0)).unwrap();
    let y = tape.leaf(Tensor::scalar(3.0)).unwrap();
    let l = tape.mul(x, y).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 3.0);
    assert_eq!(g.get(y).unwrap().item(), 2.0);
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0)).unwrap();
    let l = tape.sigmoid(x).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 0.25);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(tape.backward(x), Err(NumericsError::Contract(_))));
}

#[test]
fn foreign_variable_is_rejected() {
    let mut a = Tape::new();
    let mut b = Tape::new();
    let xa = a.leaf(Tensor::scalar(1.0)).unwrap();
    let xb = b.leaf(Tensor::scalar(1.0)).unwrap();
    let l = b.scale(xb, 2.0).unwrap();
    let g = b.backward(l).unwrap();
    assert!(matches!(g.get(xa), Err(NumericsError::UnknownVar(_))));
    assert!(b.sigmoid(xa).is_err());
}

#[test]
fn constants_have_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(1.0)).unwrap();
    let c = tape.constant(Tensor::scalar(5.0)).unwrap();
    let l = tape.mul(x, c).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 5.0);
    assert!(g.get(c).is_err());
}

#[test]
fn backward_twice_gives_identical_results() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.leaf(random(&mut rng, &[3, 4])).unwrap();
    let w = tape.leaf(random(&mut rng, &[4, 2])).unwrap();
    let h = tape.matmul(x, w).unwrap();
    let h = tape.tanh(h).unwrap();
    let l = tape.sum(h).unwrap();
    let g1 = tape.backward(l).unwrap();
    let g2 = tape.backward(l).unwrap();
    assert_eq!(g1.get(x).unwrap(), g2.get(x).unwrap());
    assert_eq!(g1.get(w).unwrap(), g2.get(w).unwrap());
}

#[test]
fn ln_of_zero_is_reported_not_propagated() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0)).unwrap();
    assert!(matches!(tape.ln(x), Err(NumericsError::NonFinite { op: "ln" })));
}

#[test]
fn dropout_is_inverted_and_seeded() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1000], 1.0)).unwrap();
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut r2 = ChaCha8Rng::seed_from_u64(9);
    let a = tape.dropout(x, 0.2, &mut r1).unwrap();
    let b = tape.dropout(x, 0.2, &mut r2).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
    for &v in tape.value(a).data() {
        assert!(v == 0.0 || (v - 1.25).abs() < 1e-12);
    }
    let mean = tape.value(a).data().iter().sum::<Scalar>() / 1000.0;
    assert!((mean - 1.0).abs() < 0.1);
}

#[test]
fn l2_normalize_examples() {
    assert_eq!(l2_normalize(&Tensor::vector(vec![3.0, 4.0])).data(), &[0.6, 0.8]);
    assert_eq!(l2_normalize(&Tensor::vector(vec![0.0, 0.0])).data(), &[0.0, 0.0]);
    let rows = l2_normalize_rows(&Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap());
    assert_eq!(rows.data(), &[0.6, 0.8, 0.0, 0.0]);
}

proptest! {
    #[test]
    fn l2_normalize_has_unit_norm(v in proptest::collection::vec(-100.0f64..100.0, 1..40)) {
        let t = Tensor::vector(v.iter().map(|&x| x as Scalar).collect());
        prop_assume!(t.norm_l2() > 1e-6);
        prop_assert!((l2_normalize(&t).norm_l2() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases: Vec<(&str, Box<Build>, Vec<Tensor>)> = vec![
        (
            "matmul",
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y = t.mul(y, y)?;
                t.sum(y)
            }),
            vec![random(&mut rng, &[2, 3, 4]), random(&mut rng, &[4, 5])],
        ),
        (
            "bmm",
            Box::new(|t, v| {
                let y = t.bmm(v[0], v[1], false)?;
                let z = t.bmm(y, v[2], true)?;
                let z = t.tanh(z)?;
                t.sum(z)
            }),
            vec![random(&mut rng, &[2, 3, 4]), random(&mut rng, &[2, 4, 5]), random(&mut rng, &[2, 3, 5])],
        ),
        (
            "add_sub_mul_broadcast",
            Box::new(|t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.sub(a, v[1])?;
                let c = t.mul(b, v[1])?;
                let d = t.add_broadcast(c, v[2])?;
                let e = t.scale(d, 1.7)?;
                let e = t.sigmoid(e)?;
                t.sum(e)
            }),
            vec![random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4]), random(&mut rng, &[4])],
        ),
        (
            "relu_ln_clamp",
            Box::new(|t, v| {
                let a = t.relu(v[0])?;
                let s = t.sigmoid(v[0])?;
                let c = t.clamp(s, 1e-12, 1.0 - 1e-12)?;
                let l = t.ln(c)?;
                let m = t.mul(a, l)?;
                t.sum(m)
            }),
            vec![Tensor::vector(vec![0.7, -0.3, 1.5, -2.0, 0.2])],
        ),
        (
            "softmax",
            Box::new(|t, v| {
                let p = t.softmax(v[0])?;
                let w = t.mul(p, v[1])?;
                t.sum(w)
            }),
            vec![random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4])],
        ),
        (
            "layer_norm",
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-8)?;
                let y = t.mul(y, v[3])?;
                t.sum(y)
            }),
            vec![
                random(&mut rng, &[3, 5]),
                random(&mut rng, &[5]),
                random(&mut rng, &[5]),
                random(&mut rng, &[3, 5]),
            ],
        ),
        (
            "gather_concat_slice",
            Box::new(|t, v| {
                let g = t.gather(v[0], &[2, 0, 2, 1])?;
                let c = t.concat(&[g, v[1]])?;
                let s = t.slice_last(c, 1, 3)?;
                let s = t.tanh(s)?;
                t.sum(s)
            }),
            vec![random(&mut rng, &[3, 2]), random(&mut rng, &[4, 3])],
        ),
        (
            "masked_fill_select_stack",
            Box::new(|t, v| {
                let m = t.masked_fill(v[0], &[false, true, false, false, true, false, false, false], -5.0)?;
                let r = t.reshape(m, &[2, 2, 2])?;
                let a = t.select1(r, 0)?;
                let b = t.select1(r, 1)?;
                let ab = t.mul(a, b)?;
                let s = t.stack1(&[ab, a, b])?;
                let s = t.sigmoid(s)?;
                t.sum(s)
            }),
            vec![random(&mut rng, &[8])],
        ),
        (
            "norms",
            Box::new(|t, v| {
                let r = t.row_norm(v[0])?;
                let n = t.l2_norm(v[0])?;
                let s = t.sum_last(v[0])?;
                let rs = t.mul(r, s)?;
                let total = t.sum(rs)?;
                let total = t.add(total, n)?;
                t.mean(total)
            }),
            vec![random(&mut rng, &[3, 4])],
        ),
    ];
    for (name, build, inputs) in cases {
        let err = grad_check(build.as_ref(), &inputs, 1e-5);
        assert!(err < 1e-6, "{}: relative error {}", name, err);
    }
}

/// Random three-layer tanh/sigmoid network with a layer-normalized middle.
#[test]
fn random_three_layer_composition_matches_finite_differences() {
    let build: Box<Build> = Box::new(|t, v| {
        let h1 = t.matmul(v[0], v[1])?;
        let h1 = t.add_broadcast(h1, v[2])?;
        let h1 = t.tanh(h1)?;
        let h2 = t.matmul(h1, v[3])?;
        let h2 = t.layer_norm(h2, v[4], v[5], 1e-8)?;
        let h2 = t.sigmoid(h2)?;
        let h3 = t.matmul(h2, v[6])?;
        let p = t.softmax(h3)?;
        let p = t.clamp(p, 1e-12, 1.0)?;
        let lp = t.ln(p)?;
        let s = t.sum(lp)?;
        t.scale(s, -1.0)
    });
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            random(&mut rng, &[4, 3]),
            random(&mut rng, &[3, 5]),
            random(&mut rng, &[5]),
            random(&mut rng, &[5, 4]),
            random(&mut rng, &[4]),
            random(&mut rng, &[4]),
            random(&mut rng, &[4, 3]),
        ];
        let err = grad_check(build.as_ref(), &inputs, 1e-4);
        assert!(err < 1e-4, "seed {}: relative error {}", seed, err);
    }
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[6, 7])).unwrap();
        let w = tape.leaf(random(&mut rng, &[7, 3])).unwrap();
        let h = tape.matmul(x, w).unwrap();
        let h = tape.dropout(h, 0.3, &mut rng).unwrap();
        let p = tape.softmax(h).unwrap();
        let l = tape.l2_norm(p).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).clone(), g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

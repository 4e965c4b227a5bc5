mod common;

use common::{conv_valid_oracle, matmul_oracle, op_cases, pool_oracle, randn};
use istpa::gradcheck::{grad_check, grad_check_many, GradCheckOptions};
use istpa::tape::{Combine, Padding, L2_EPSILON};
use istpa::{Error, Tape, Tensor, Var};
use proptest::prelude::*;

fn run1(x: &Tensor, f: impl Fn(&mut Tape, Var) -> Var) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v);
    tape.value(out).clone()
}

// ---------------------------------------------------------------- matmul

#[test]
fn matmul_identity_and_zero() {
    let b = randn(&[2, 5], 1);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::eye(2));
    let bv = tape.constant(b.clone());
    let out = tape.matmul(i, bv).unwrap();
    assert_eq!(tape.value(out), &b);

    let z = tape.constant(Tensor::zeros(&[2, 3]));
    let b2 = tape.constant(randn(&[3, 2], 2));
    let out = tape.matmul(z, b2).unwrap();
    assert_eq!(tape.value(out), &Tensor::zeros(&[2, 2]));
}

#[test]
fn matmul_matches_triple_loop() {
    let a = randn(&[2, 3], 3);
    let b = randn(&[3, 2], 4);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(av, bv).unwrap();
    assert!(tape.value(out).max_abs_diff(&matmul_oracle(&a, &b)) < 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

// --------------------------------------------------------------- softmax

#[test]
fn softmax_constant_and_analytic_rows() {
    let x = Tensor::from_rows(&[&[3.0, 3.0, 3.0, 3.0]]);
    let y = run1(&x, |t, v| t.softmax_rows(v).unwrap());
    for v in y.data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
    let x = Tensor::from_rows(&[&[0.0, 2f64.ln()]]);
    let y = run1(&x, |t, v| t.softmax_rows(v).unwrap());
    assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_shift_invariance() {
    let x = randn(&[3, 6], 5);
    let mut shifted = x.clone();
    shifted.data_mut().iter_mut().for_each(|v| *v += 17.25);
    let a = run1(&x, |t, v| t.softmax_rows(v).unwrap());
    let b = run1(&shifted, |t, v| t.softmax_rows(v).unwrap());
    assert!(a.max_abs_diff(&b) < 1e-12);
}

// ------------------------------------------------------------------- l2

#[test]
fn l2_normalize_cases() {
    let x = Tensor::from_rows(&[&[3.0, 4.0], &[0.6, 0.8], &[0.0, 0.0]]);
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let (out, flagged) = tape.l2_normalize_rows(v, L2_EPSILON).unwrap();
    let y = tape.value(out);
    assert!((y.at2(0, 0) - 0.6).abs() < 1e-15 && (y.at2(0, 1) - 0.8).abs() < 1e-15);
    assert_eq!(y.row(1), &[0.6, 0.8]);
    assert_eq!(y.row(2), &[0.0, 0.0]);
    assert_eq!(flagged, vec![2]);
}

// -------------------------------------------------------------- combine

#[test]
fn combine_identities() {
    let x = randn(&[3, 4], 6);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ones = tape.constant(Tensor::ones(&[3, 4]));
    let m = tape.combine(Combine::Multiplication, &[xv, ones]).unwrap();
    assert_eq!(tape.value(m), &x);
    let mx = tape.combine(Combine::Maximum, &[xv, xv]).unwrap();
    assert_eq!(tape.value(mx), &x);
}

#[test]
fn combine_sum_matches_scalar_loop() {
    let xs: Vec<Tensor> = (0..3).map(|s| randn(&[2, 5], 10 + s)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = tape.combine(Combine::Sum, &vars).unwrap();
    for i in 0..10 {
        let mut s = 0.0;
        for t in &xs {
            s += t.data()[i];
        }
        assert!((tape.value(out).data()[i] - s).abs() < 1e-12);
    }
}

#[test]
fn combine_errors() {
    let mut tape = Tape::new();
    assert!(matches!(
        tape.combine(Combine::Sum, &[]),
        Err(Error::Contract(_))
    ));
    let a = tape.constant(Tensor::zeros(&[2, 2]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        tape.combine(Combine::Sum, &[a, b]),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn combine_max_routes_ties_to_first() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0]]));
    let b = tape.leaf(Tensor::from_rows(&[&[1.0, 3.0]]));
    let m = tape.combine(Combine::Maximum, &[a, b]).unwrap();
    let s = tape.sum(m);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[1.0, 0.0]);
    assert_eq!(tape.grad(b).unwrap(), &[0.0, 1.0]);
}

// --------------------------------------------------------------- pooling

#[test]
fn pool_identity_and_global() {
    let x = randn(&[2, 5, 5, 3], 7);
    let same = run1(&x, |t, v| t.adaptive_max_pool2d(v, (5, 5)).unwrap());
    assert_eq!(same, x);
    let g = run1(&x, |t, v| t.adaptive_max_pool2d(v, (1, 1)).unwrap());
    for f in 0..2 {
        for c in 0..3 {
            let mut best = f64::NEG_INFINITY;
            for p in 0..25 {
                best = best.max(x.data()[(f * 25 + p) * 3 + c]);
            }
            assert_eq!(g.data()[f * 3 + c], best);
        }
    }
}

#[test]
fn pool_5_to_2_matches_window_enumeration() {
    let x = randn(&[1, 5, 5, 2], 8);
    let y = run1(&x, |t, v| t.adaptive_max_pool2d(v, (2, 2)).unwrap());
    assert_eq!(y, pool_oracle(&x, 2, 2));
}

#[test]
fn pool_rejects_upsampling() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(&[1, 3, 3, 1]));
    assert!(matches!(
        tape.adaptive_max_pool2d(v, (4, 2)),
        Err(Error::Dimension { .. })
    ));
}

// ----------------------------------------------------------------- conv

#[test]
fn conv_delta_and_zero_kernels() {
    let x = randn(&[2, 6, 6, 1], 9);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let delta = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
    let out = tape.conv2d(xv, delta, 1, Padding::Same).unwrap();
    assert_eq!(tape.value(out), &x);
    let zero = tape.constant(Tensor::zeros(&[3, 3, 1, 4]));
    let out = tape.conv2d(xv, zero, 1, Padding::Same).unwrap();
    assert_eq!(tape.value(out), &Tensor::zeros(&[2, 6, 6, 4]));
}

#[test]
fn conv_valid_matches_loop_oracle() {
    let x = randn(&[1, 6, 6, 2], 10);
    let k = randn(&[3, 3, 2, 3], 11);
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
    let out = tape.conv2d(xv, kv, 1, Padding::Valid).unwrap();
    assert!(tape.value(out).max_abs_diff(&conv_valid_oracle(&x, &k, 1)) < 1e-12);
}

#[test]
fn conv_same_equals_valid_on_zero_padded_input() {
    let x = randn(&[2, 5, 7, 2], 12);
    let k = randn(&[3, 3, 2, 4], 13);
    let mut padded = Tensor::zeros(&[2, 7, 9, 2]);
    for f in 0..2 {
        for w in 0..5 {
            for h in 0..7 {
                for c in 0..2 {
                    padded.data_mut()[((f * 7 + w + 1) * 9 + h + 1) * 2 + c] =
                        x.data()[((f * 5 + w) * 7 + h) * 2 + c];
                }
            }
        }
    }
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(x), tape.constant(k.clone()));
    let out = tape.conv2d(xv, kv, 1, Padding::Same).unwrap();
    assert!(
        tape.value(out)
            .max_abs_diff(&conv_valid_oracle(&padded, &k, 1))
            < 1e-12
    );
}

#[test]
fn conv_rejects_zero_stride() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 4, 4, 1]));
    let k = tape.constant(Tensor::zeros(&[3, 3, 1, 1]));
    assert!(matches!(
        tape.conv2d(x, k, 0, Padding::Valid),
        Err(Error::Parameter(_))
    ));
}

// ----------------------------------------------------------- relu/affine

#[test]
fn relu_cases() {
    let pos = Tensor::from_rows(&[&[0.5, 2.0]]);
    assert_eq!(run1(&pos, |t, v| t.relu(v)), pos);
    let neg = Tensor::from_rows(&[&[-0.5, -2.0]]);
    assert_eq!(run1(&neg, |t, v| t.relu(v)), Tensor::zeros(&[1, 2]));
    let mixed = randn(&[4, 4], 14);
    let y = run1(&mixed, |t, v| t.relu(v));
    for (a, b) in y.data().iter().zip(mixed.data()) {
        assert_eq!(*a, if *b > 0.0 { *b } else { 0.0 });
    }
}

#[test]
fn relu_gradient_is_zero_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_rows(&[&[0.0, 1.0, -1.0]]));
    let r = tape.relu(x);
    let s = tape.sum(r);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
}

#[test]
fn affine_cases() {
    let x = randn(&[3, 4], 15);
    let b = randn(&[4], 16);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let i = tape.constant(Tensor::eye(4));
    let zb = tape.constant(Tensor::zeros(&[4]));
    let out = tape.affine(xv, i, zb).unwrap();
    assert_eq!(tape.value(out), &x);

    let z = tape.constant(Tensor::zeros(&[3, 4]));
    let w = tape.constant(randn(&[4, 4], 17));
    let bv = tape.constant(b.clone());
    let out = tape.affine(z, w, bv).unwrap();
    for r in 0..3 {
        assert_eq!(tape.value(out).row(r), b.data());
    }

    let w = randn(&[4, 2], 18);
    let b2 = randn(&[2], 19);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b2.clone()),
    );
    let out = tape.affine(xv, wv, bv).unwrap();
    let mut expected = matmul_oracle(&x, &w);
    for r in 0..3 {
        for c in 0..2 {
            expected.data_mut()[r * 2 + c] += b2.data()[c];
        }
    }
    assert!(tape.value(out).max_abs_diff(&expected) < 1e-12);
}

// ------------------------------------------------------------- backward

#[test]
fn backward_simple_losses() {
    let x = randn(&[2, 3], 20);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let s = tape.sum(v);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let sq = tape.sum_squares(v);
    let half = tape.scale(sq, 0.5);
    tape.backward(half).unwrap();
    assert_eq!(tape.grad(v).unwrap(), x.data());
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
}

#[test]
fn backward_twice_doubles_gradients() {
    let x = randn(&[3], 21);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let sq = tape.sum_squares(v);
    tape.backward(sq).unwrap();
    let once = tape.grad(v).unwrap().to_vec();
    tape.backward(sq).unwrap();
    let twice = tape.grad(v).unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
    tape.zero_grad();
    assert!(tape.grad(v).is_none());
}

#[test]
fn fan_out_accumulates_both_paths() {
    // loss = sum(x·w) + sum_squares(x): x feeds two consumers.
    let x = randn(&[2, 3], 22);
    let w = randn(&[3, 2], 23);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.constant(w.clone());
    let p = tape.matmul(xv, wv).unwrap();
    let a = tape.sum(p);
    let b = tape.sum_squares(xv);
    let l = tape.add(a, b).unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad(xv).unwrap();
    for r in 0..2 {
        for t in 0..3 {
            let path1: f64 = (0..2).map(|j| w.data()[t * 2 + j]).sum();
            let path2 = 2.0 * x.data()[r * 3 + t];
            assert!((g[r * 3 + t] - (path1 + path2)).abs() < 1e-12);
        }
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::ones(&[2]));
    let x = tape.leaf(Tensor::ones(&[2]));
    let s = tape.add(c, x).unwrap();
    let l = tape.sum(s);
    tape.backward(l).unwrap();
    assert!(tape.grad(c).is_none());
    assert!(tape.grad(x).is_some());
}

// ------------------------------------------------------------ grad_check

#[test]
fn grad_check_linear_is_exact() {
    let x = randn(&[3, 4], 24);
    let w = randn(&[4, 2], 25);
    let err = grad_check(
        |t, v| {
            let wv = t.constant(w.clone());
            let p = t.matmul(v, wv)?;
            Ok(t.sum(p))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn grad_check_softmax_composite() {
    let x = randn(&[3, 5], 26);
    let w = randn(&[3, 5], 27);
    let err = grad_check(
        |t, v| {
            let s = t.softmax_rows(v)?;
            let wv = t.constant(w.clone());
            let p = t.combine(Combine::Multiplication, &[s, wv])?;
            Ok(t.sum(p))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_every_differentiable_op() {
    for (name, inputs, f) in op_cases(3) {
        let rep = grad_check_many(&*f, &inputs, GradCheckOptions::default()).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{name}: {rep:?}");
    }
}

// ------------------------------------------------------------ properties

fn finite_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-50.0f64..50.0, r * c)
            .prop_map(move |d| Tensor::new(&[r, c], d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in finite_matrix(6, 9)) {
        let y = run1(&x, |t, v| t.softmax_rows(v).unwrap());
        let cols = x.shape()[1];
        for row in y.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn l2_rows_have_unit_norm(x in finite_matrix(6, 9)) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let (out, flagged) = tape.l2_normalize_rows(v, L2_EPSILON).unwrap();
        let cols = x.shape()[1];
        for (r, row) in tape.value(out).data().chunks(cols).enumerate() {
            if flagged.contains(&r) { continue; }
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loop_oracles_agree(seed in 0u64..1000, m in 1usize..=8, k in 1usize..=8, n in 1usize..=8) {
        let a = randn(&[m, k], seed);
        let b = randn(&[k, n], seed + 1);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let out = tape.matmul(av, bv).unwrap();
        prop_assert!(tape.value(out).max_abs_diff(&matmul_oracle(&a, &b)) < 1e-12);

        let x = randn(&[2, m, n, 2], seed + 2);
        let (tw, th) = (1 + seed as usize % m, 1 + (seed as usize / 7) % n);
        let y = run1(&x, |t, v| t.adaptive_max_pool2d(v, (tw, th)).unwrap());
        prop_assert_eq!(y, pool_oracle(&x, tw, th));

        let kh = 1 + seed as usize % m.min(3);
        let kw = 1 + (seed as usize / 3) % n.min(3);
        let kern = randn(&[kh, kw, 2, 3], seed + 3);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(kern.clone()));
        let out = tape.conv2d(xv, kv, 1, Padding::Valid).unwrap();
        prop_assert!(tape.value(out).max_abs_diff(&conv_valid_oracle(&x, &kern, 1)) < 1e-12);
    }
}

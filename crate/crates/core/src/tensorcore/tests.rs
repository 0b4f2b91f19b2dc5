use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{central_difference, max_rel_error};
use super::*;
use crate::error::{Error, Result};
use crate::grid::UNKNOWN;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Checks the backward pass of `build` against central differences of
/// `sum(build(inputs) * r)` for a fixed random `r`.
fn check_op<F>(inputs: Vec<Tensor<f64>>, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).shape().to_vec()
    };
    let r = random_tensor(&mut rng, &probe_shape);
    let loss_of = |ins: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv).unwrap();
        let s = tape.sum(prod).unwrap();
        tape.value(s).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv).unwrap();
    let s = tape.sum(prod).unwrap();
    let grads = tape.backward(s).unwrap();
    let numeric = central_difference(&inputs, 1e-5, loss_of);
    vars.iter()
        .zip(&numeric)
        .map(|(&v, n)| {
            let a = grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(n.shape()));
            max_rel_error(&a, n)
        })
        .fold(0.0, f64::max)
}

#[test]
fn relu_definition() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn dropout_disabled_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::<f32>::new();
    let data: Vec<f32> = (0..16).map(|i| i as f32 * 0.37 - 2.0).collect();
    let x = tape.constant(Tensor::new(&[1, 1, 4, 4], data.clone()).unwrap());
    let y = tape.dropout(x, 0.5, &mut rng, false).unwrap();
    let bits: Vec<u32> = tape.value(y).data().iter().map(|v| v.to_bits()).collect();
    let want: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
    assert_eq!(bits, want);
}

#[test]
fn conv_of_ones_sums_window() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, w, None).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[4], 9.0);
    assert_eq!(v[0], 4.0);
    assert_eq!(v[1], 6.0);
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::<f64>::new();
    let t = tape.param(Tensor::new(&[3], vec![0.3, -2.0, 5.0]).unwrap());
    let s = tape.sum(t).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(t).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::<f64>::new();
    let t = tape.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let sq = tape.mul(t, t).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(t).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f64>::new();
    let t = tape.param(Tensor::zeros(&[2]));
    let y = tape.scale(t, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
}

#[test]
fn shape_mismatch_is_config_error() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.add(a, b), Err(Error::Config(_))));
}

#[test]
fn non_finite_output_is_numeric_error() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::full(&[2], f64::MAX));
    let err = tape.scale(a, 10.0).unwrap_err();
    match err {
        Error::Numeric { op, .. } => assert!(op.starts_with("scale")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn gradients_accumulate_over_reuse() {
    // y = x + x + 3x -> dy/dx = 5
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
    let a = tape.add(x, x).unwrap();
    let b = tape.scale(x, 3.0).unwrap();
    let c = tape.add(a, b).unwrap();
    let s = tape.sum(c).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[5.0, 5.0]);
}

#[test]
fn gradcheck_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[1, 2, 4, 4]);
    let w = random_tensor(&mut rng, &[2, 2, 3, 3]);
    let b = random_tensor(&mut rng, &[2]);
    let err = check_op(vec![x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2])));
    assert!(err < 1e-5, "conv2d rel err {err}");
}

#[test]
fn gradcheck_conv2d_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[2, 3, 3, 3]);
    let w = random_tensor(&mut rng, &[2, 3, 1, 1]);
    let err = check_op(vec![x, w], |t, v| t.conv2d(v[0], v[1], None));
    assert!(err < 1e-5, "1x1 conv rel err {err}");
}

#[test]
fn gradcheck_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[1, 2, 4, 4]).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    let err = check_op(vec![x], |t, v| t.relu(v[0]));
    assert!(err < 1e-5, "relu rel err {err}");
}

#[test]
fn gradcheck_max_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, &[2, 2, 4, 4]);
    let err = check_op(vec![x], |t, v| t.max_pool2(v[0]));
    assert!(err < 1e-5, "max_pool2 rel err {err}");
}

#[test]
fn gradcheck_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&mut rng, &[1, 2, 3, 4]);
    let err = check_op(vec![x], |t, v| t.upsample_bilinear2(v[0]));
    assert!(err < 1e-5, "upsample rel err {err}");
}

#[test]
fn gradcheck_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_tensor(&mut rng, &[2, 1, 3, 3]);
    let b = random_tensor(&mut rng, &[2, 2, 3, 3]);
    let err = check_op(vec![a, b], |t, v| t.concat_channels(v[0], v[1]));
    assert!(err < 1e-5, "concat rel err {err}");
}

#[test]
fn gradcheck_dropout() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&mut rng, &[1, 2, 4, 4]);
    let err = check_op(vec![x], |t, v| {
        let mut r = ChaCha8Rng::seed_from_u64(1234);
        t.dropout(v[0], 0.3, &mut r, true)
    });
    assert!(err < 1e-5, "dropout rel err {err}");
}

#[test]
fn gradcheck_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_tensor(&mut rng, &[2, 3, 3, 3]);
    let err = check_op(vec![x], |t, v| t.softmax_channels(v[0]));
    assert!(err < 1e-5, "softmax rel err {err}");
}

#[test]
fn gradcheck_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_tensor(&mut rng, &[2, 4, 4]);
    let b = random_tensor(&mut rng, &[2, 4, 4]);
    for (name, err) in [
        ("add", check_op(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]))),
        ("sub", check_op(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]))),
        ("mul", check_op(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]))),
        ("scale", check_op(vec![a.clone()], |t, v| t.scale(v[0], -1.7))),
    ] {
        assert!(err < 1e-5, "{name} rel err {err}");
    }
}

#[test]
fn gradcheck_channel_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(&mut rng, &[2, 3, 3, 3]);
    let w = random_tensor(&mut rng, &[3]);
    let m = random_tensor(&mut rng, &[3, 3]);
    let e1 = check_op(vec![x.clone(), w], |t, v| t.scale_channels(v[0], v[1]));
    let e2 = check_op(vec![x, m], |t, v| t.mix_channels(v[0], v[1]));
    assert!(e1 < 1e-5, "scale_channels rel err {e1}");
    assert!(e2 < 1e-5, "mix_channels rel err {e2}");
}

struct Shift;

impl LinearOperator<f64> for Shift {
    fn name(&self) -> &str {
        "shift"
    }
    fn apply(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let n = x.len();
        Tensor::new(x.shape(), (0..n).map(|i| 2.0 * x.data()[(i + 1) % n]).collect())
    }
    fn apply_adjoint(&self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        let n = g.len();
        Tensor::new(g.shape(), (0..n).map(|i| 2.0 * g.data()[(i + n - 1) % n]).collect())
    }
}

#[test]
fn gradcheck_linear_operator() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_tensor(&mut rng, &[1, 1, 2, 5]);
    let op: Rc<dyn LinearOperator<f64>> = Rc::new(Shift);
    let err = check_op(vec![x], move |t, v| t.linear(v[0], op.clone()));
    assert!(err < 1e-5, "linear rel err {err}");
}

#[test]
fn gradcheck_masked_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let logits = random_tensor(&mut rng, &[1, 3, 4, 4]);
    let targets: Vec<u8> = (0..16)
        .map(|i| if i % 5 == 0 { UNKNOWN } else { (i % 3) as u8 })
        .collect();
    let err = check_op(vec![logits], |t, v| t.masked_cross_entropy(v[0], &targets));
    assert!(err < 1e-5, "masked ce rel err {err}");
}

#[test]
fn cross_entropy_uniform_two_class() {
    let mut tape = Tape::<f64>::new();
    let l = tape.param(Tensor::zeros(&[1, 2, 1, 1]));
    let loss = tape.masked_cross_entropy(l, &[0]).unwrap();
    assert!((tape.value(loss).data()[0] - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_all_unknown_is_zero() {
    let mut tape = Tape::<f64>::new();
    let l = tape.param(Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64));
    let loss = tape.masked_cross_entropy(l, &[UNKNOWN; 4]).unwrap();
    assert_eq!(tape.value(loss).data()[0], 0.0);
    let g = tape.backward(loss).unwrap();
    let zero = g.wrt(l).map(|t| t.data().iter().all(|&v| v == 0.0)).unwrap_or(true);
    assert!(zero);
}

#[test]
fn cross_entropy_vanishes_with_margin() {
    let mut last = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 40.0] {
        let mut tape = Tape::<f64>::new();
        let l = tape.param(Tensor::new(&[1, 2, 1, 1], vec![margin, 0.0]).unwrap());
        let loss = tape.masked_cross_entropy(l, &[0]).unwrap();
        let v = tape.value(loss).data()[0];
        assert!(v < last);
        last = v;
    }
    assert!(last < 1e-15);
}

#[test]
fn dropout_expectation_is_preserved() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let reps = 100_000;
    let mut total = 0.0f64;
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[4], 2.5));
    for _ in 0..reps {
        let y = tape.dropout(x, 0.5, &mut rng, true).unwrap();
        total += tape.value(y).data().iter().map(|&v| v as f64).sum::<f64>();
        // drop the node to keep the tape small
        if tape.len() > 1024 {
            tape = Tape::new();
            let _ = tape.constant(Tensor::full(&[4], 2.5));
        }
    }
    let mean = total / (reps as f64 * 4.0);
    assert!((mean - 2.5).abs() / 2.5 < 0.01, "mean {mean}");
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 1, 8, 8], |i| ((i * 37) % 17) as f32 / 17.0));
        let w = tape.param(Tensor::from_fn(&[4, 1, 3, 3], |i| (i as f32 * 0.1).sin()));
        let h = tape.conv2d(x, w, None).unwrap();
        let h = tape.relu(h).unwrap();
        let h = tape.dropout(h, 0.5, &mut rng, true).unwrap();
        let h = tape.max_pool2(h).unwrap();
        let h = tape.upsample_bilinear2(h).unwrap();
        let s = tape.sum(h).unwrap();
        let g = tape.backward(s).unwrap();
        (
            tape.value(s).data()[0].to_bits(),
            g.wrt(w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

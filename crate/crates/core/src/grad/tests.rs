use super::*;
use crate::testutil::{max_gradient_error, random_tensor};
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn sigmoid_at_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.0));
    let y = tape.sigmoid(x);
    assert_eq!(tape.value(y).item(), 0.5);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 0.25);
}

#[test]
fn huber_branches() {
    assert_eq!(huber(0.3, 1.0), 0.045);
    assert_eq!(huber(-0.5, 0.5), 0.125);
    let delta = 0.7;
    assert!((huber(2.0 * delta, delta) - 1.5 * delta * delta).abs() < 1e-15);
    assert_eq!(huber_grad(delta, delta), delta);
    assert_eq!(huber_grad(-3.0, delta), -delta);
}

#[test]
fn log_rejects_non_positive() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[1.0, 0.0]));
    assert!(matches!(tape.log(x), Err(GradError::Domain(_))));
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(GradError::InvalidInput(_))));
}

#[test]
fn identity_loss_and_square_sum() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    tape.backward(x).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 1.0);

    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn repeated_backward_accumulates_on_leaves() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let y = tape.scale(x, 3.0);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[6.0, 6.0]);
    tape.zero_grad();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let c = tape.constant(Tensor::scalar(5.0));
    let y = tape.mul(x, c).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 5.0);
    assert!(tape.grad(c).is_none());
}

#[test]
fn scalar_broadcast_both_sides() {
    let mut tape = Tape::new();
    let s = tape.param(Tensor::scalar(2.0));
    let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.sub(s, x).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0, -1.0]);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(s).unwrap().item(), 3.0);
    assert_eq!(tape.grad(x).unwrap().data(), &[-1.0, -1.0, -1.0]);
    let bad = tape.constant(t(&[2], &[1.0, 1.0]));
    assert!(matches!(tape.add(x, bad), Err(GradError::Shape(_))));
}

#[test]
fn matmul_identity_and_scalar() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let y = tape.matmul(a, eye).unwrap();
    assert_eq!(tape.value(y), tape.value(a));

    let p = tape.constant(t(&[1, 1], &[3.0]));
    let q = tape.constant(t(&[1, 1], &[-1.5]));
    let r = tape.matmul(p, q).unwrap();
    assert_eq!(tape.value(r).item(), -4.5);
    assert!(matches!(tape.matmul(a, a), Err(GradError::Shape(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let a = random_tensor(&[3, 4], -2.0, 2.0, seed);
        let b = random_tensor(&[4, 2], -2.0, 2.0, seed + 100);
        let w = random_tensor(&[3, 2], -2.0, 2.0, seed + 200);
        let err = max_gradient_error(&[a, b], STEP, |tape, v| {
            let y = tape.matmul(v[0], v[1]).unwrap();
            let w = tape.constant(w.clone());
            let yw = tape.mul(y, w).unwrap();
            tape.sum(yw)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn conv_pointwise_and_first_difference() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let k = tape.constant(t(&[1, 2, 1], &[2.0, -1.0]));
    let y = tape.causal_conv1d(x, k, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[-2.0, -1.0, 0.0]);

    let x = tape.constant(t(&[1, 3], &[2., 3., 1.]));
    let k = tape.constant(t(&[1, 1, 2], &[1.0, -1.0]));
    let y = tape.causal_conv1d(x, k, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 1.0, -2.0]);

    let k3 = tape.constant(t(&[1, 2, 2], &[1., 1., 1., 1.]));
    assert!(matches!(tape.causal_conv1d(x, k3, 1), Err(GradError::Shape(_))));
}

#[test]
fn conv_is_causal() {
    let base = random_tensor(&[2, 3, 12], -2.0, 2.0, 9);
    let kernel = random_tensor(&[4, 2, 3], -1.0, 1.0, 10);
    let run = |input: Tensor| {
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let k = tape.constant(kernel.clone());
        let y = tape.causal_conv1d(x, k, 2).unwrap();
        tape.value(y).clone()
    };
    let before = run(base.clone());
    for cut in [0usize, 5, 11] {
        let mut perturbed = base.clone();
        // perturb every channel of batch 1 at time `cut`
        for c in 0..2 {
            perturbed.data_mut()[(c * 3 + 1) * 12 + cut] += 1.0;
        }
        let after = run(perturbed);
        for o in 0..4 {
            for b in 0..3 {
                for time in 0..12 {
                    let idx = (o * 3 + b) * 12 + time;
                    if b != 1 || time < cut {
                        assert_eq!(before.data()[idx], after.data()[idx]);
                    }
                }
            }
        }
    }
}

#[test]
fn conv_gradient_matches_finite_differences() {
    for (seed, dilation) in [(1u64, 1usize), (2, 2), (3, 4)] {
        let x = random_tensor(&[3, 2, 9], -2.0, 2.0, seed);
        let k = random_tensor(&[2, 3, 3], -2.0, 2.0, seed + 50);
        let w = random_tensor(&[2, 2, 9], -2.0, 2.0, seed + 99);
        let err = max_gradient_error(&[x, k], STEP, |tape, v| {
            let y = tape.causal_conv1d(v[0], v[1], dilation).unwrap();
            let w = tape.constant(w.clone());
            let yw = tape.mul(y, w).unwrap();
            tape.sum(yw)
        });
        assert!(err < TOL, "dilation {dilation}: {err}");
    }
}

#[test]
fn attention_singleton_and_uniform() {
    let mut tape = Tape::new();
    let q = tape.constant(t(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 0.0, -2.0]));
    let k = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
    let v = tape.constant(t(&[1, 2], &[7.0, -3.0]));
    let y = tape.softmax_attention(q, k, v, 0.5).unwrap();
    assert_eq!(tape.value(y).data(), &[7.0, -3.0, 7.0, -3.0]);

    let k = tape.constant(t(&[3, 2], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]));
    let v = tape.constant(t(&[3, 1], &[1.0, 2.0, 6.0]));
    let q = tape.constant(t(&[1, 2], &[0.4, -0.9]));
    let y = tape.softmax_attention(q, k, v, 1.0).unwrap();
    assert!((tape.value(y).item() - 3.0).abs() < 1e-12);
}

#[test]
fn attention_is_stable_for_large_scores() {
    let mut tape = Tape::new();
    let q = tape.constant(random_tensor(&[4, 3], -1e3, 1e3, 1));
    let k = tape.constant(random_tensor(&[5, 3], -1e3, 1e3, 2));
    let eye = Tensor::new(
        vec![5, 5],
        (0..25).map(|i| if i % 6 == 0 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let v = tape.constant(eye);
    let y = tape.softmax_attention(q, k, v, 1.0).unwrap();
    for row in tape.value(y).data().chunks(5) {
        assert!(row.iter().all(|p| p.is_finite()));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_gradient_matches_finite_differences() {
    for seed in 0..4 {
        let q = random_tensor(&[2, 3, 4], -2.0, 2.0, seed);
        let k = random_tensor(&[2, 5, 4], -2.0, 2.0, seed + 10);
        let v = random_tensor(&[2, 5, 3], -2.0, 2.0, seed + 20);
        let w = random_tensor(&[2, 3, 3], -2.0, 2.0, seed + 30);
        let err = max_gradient_error(&[q, k, v], STEP, |tape, x| {
            let y = tape.softmax_attention(x[0], x[1], x[2], 0.5).unwrap();
            let w = tape.constant(w.clone());
            let yw = tape.mul(y, w).unwrap();
            tape.sum(yw)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
    assert!({
        let mut tape = Tape::new();
        let q = tape.constant(random_tensor(&[2, 3], 0.0, 1.0, 0));
        let k = tape.constant(random_tensor(&[4, 2], 0.0, 1.0, 0));
        tape.softmax_attention(q, k, k, 1.0).is_err()
    });
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    type Unary = fn(&mut Tape, Var) -> Var;
    let ops: Vec<(&str, Unary)> = vec![
        ("exp", |t, x| t.exp(x)),
        ("sigmoid", |t, x| t.sigmoid(x)),
        ("softplus", |t, x| t.softplus(x)),
        ("silu", |t, x| t.silu(x)),
        ("tanh", |t, x| t.tanh(x)),
        ("huber", |t, x| t.huber(x, 0.7)),
        ("scale", |t, x| t.scale(x, -1.7)),
        ("add_const", |t, x| t.add_const(x, 0.3)),
    ];
    for seed in 0..5 {
        let x = random_tensor(&[7], -2.0, 2.0, seed);
        if x.data().iter().any(|v| (v.abs() - 0.7).abs() < 1e-6) {
            continue;
        }
        let w = random_tensor(&[7], -2.0, 2.0, seed + 1000);
        for (name, op) in &ops {
            let err = max_gradient_error(std::slice::from_ref(&x), STEP, |tape, v| {
                let y = op(tape, v[0]);
                let w = tape.constant(w.clone());
                let yw = tape.mul(y, w).unwrap();
                tape.sum(yw)
            });
            assert!(err < TOL, "{name} seed {seed}: {err}");
        }
        let pos = random_tensor(&[7], 0.1, 2.0, seed);
        let err = max_gradient_error(&[pos], STEP, |tape, v| {
            let y = tape.log(v[0]).unwrap();
            let w = tape.constant(w.clone());
            let yw = tape.mul(y, w).unwrap();
            tape.sum(yw)
        });
        assert!(err < TOL, "log seed {seed}: {err}");
        let y = random_tensor(&[7], -2.0, 2.0, seed + 7);
        for which in 0..3 {
            let err = max_gradient_error(&[x.clone(), y.clone()], STEP, |tape, v| {
                let z = match which {
                    0 => tape.add(v[0], v[1]).unwrap(),
                    1 => tape.sub(v[0], v[1]).unwrap(),
                    _ => tape.mul(v[0], v[1]).unwrap(),
                };
                let w = tape.constant(w.clone());
                let zw = tape.mul(z, w).unwrap();
                tape.mean(zw)
            });
            assert!(err < TOL, "binary {which} seed {seed}: {err}");
        }
    }
}

#[test]
fn structural_gradients_match_finite_differences() {
    for seed in 0..3 {
        let x = random_tensor(&[2, 3, 4], -2.0, 2.0, seed);
        let y = random_tensor(&[2, 2, 4], -2.0, 2.0, seed + 1);
        let g = random_tensor(&[4], 0.5, 1.5, seed + 2);
        let b = random_tensor(&[4], -1.0, 1.0, seed + 3);
        let w = random_tensor(&[4, 5, 2], -2.0, 2.0, seed + 4);
        let err = max_gradient_error(&[x, y, g, b], STEP, |tape, v| {
            let cat = tape.concat(&[v[0], v[1]], 1).unwrap(); // [2,5,4]
            let ln = tape.layer_norm(cat, v[2], v[3], 1e-5).unwrap();
            let biased = tape.add_bias(ln, v[3], 2).unwrap();
            let p = tape.permute(biased, &[2, 1, 0]).unwrap(); // [4,5,2]
            let w = tape.constant(w.clone());
            let pw = tape.mul(p, w).unwrap();
            let part = tape.narrow(pw, 1, 1, 3).unwrap();
            let r = tape.reshape(part, &[24]).unwrap();
            let sq = tape.mul(r, r).unwrap();
            tape.sum(sq)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn clamp_min_blocks_gradient_below_floor() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[-1.0, 0.5, 2.0]));
    let y = tape.clamp_min(x, 1.0);
    assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

proptest! {
    #[test]
    fn softplus_is_positive(x in -700.0f64..700.0) {
        prop_assert!(softplus(x) > 0.0);
    }

    #[test]
    fn conv_preserves_length(time in 1usize..30, k in 1usize..8, dilation in 1usize..6) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, time]));
        let kern = tape.constant(Tensor::zeros(&[3, 2, k]));
        let y = tape.causal_conv1d(x, kern, dilation).unwrap();
        prop_assert_eq!(tape.shape(y), &[3, time][..]);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000, scale in 0.01f64..1.0) {
        let mut tape = Tape::new();
        let q = tape.constant(random_tensor(&[3, 4], -1e3, 1e3, seed));
        let k = tape.constant(random_tensor(&[6, 4], -1e3, 1e3, seed + 1));
        let eye = Tensor::new(vec![6, 6], (0..36).map(|i| if i % 7 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let v = tape.constant(eye);
        let y = tape.softmax_attention(q, k, v, scale).unwrap();
        for row in tape.value(y).data().chunks(6) {
            prop_assert!(row.iter().all(|p| p.is_finite()));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

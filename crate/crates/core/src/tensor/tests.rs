use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Weighted sum with fixed pseudo-random weights, so gradients are not all equal.
fn readout(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let n = tape.value(x).numel();
    let shape = tape.value(x).shape().to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let i = tape.leaf(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0]]));
    let col = tape.leaf(Tensor::from_rows(&[&[3.0], &[4.0]]));
    let d = tape.matmul(r, col).unwrap();
    assert_eq!(tape.value(d).shape(), &[1, 1]);
    assert_eq!(tape.value(d).item(), 11.0);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn matmul_sum_gradient_is_b_transpose_broadcast() {
    let a = rand_t(&[3, 4], 1);
    let b = rand_t(&[4, 2], 2);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    let s = tape.sum(c).unwrap();
    tape.backward(s).unwrap();
    let ga = tape.grad(va).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = b.row(k).iter().sum();
            assert!((ga.at2(i, k) - expect).abs() < 1e-12);
        }
    }
    let report = check_gradients(&[a, b], 1e-5, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        t.sum(c)
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{report:?}");
}

#[test]
fn softmax_hand_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let s = tape.softmax(x, 0).unwrap();
    for &p in tape.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.leaf(Tensor::vector(vec![1000.0, 0.0]));
    let s = tape.softmax(x, 0).unwrap();
    assert!((tape.value(s).data()[0] - 1.0).abs() < 1e-15);
    assert!(tape.value(s).data()[1] < 1e-300);
    let x = tape.leaf(Tensor::vector(vec![2f64.ln(), 0.0]));
    let s = tape.softmax(x, 0).unwrap();
    assert!((tape.value(s).data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((tape.value(s).data()[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_along_inner_axis_of_rank3() {
    let x = rand_t(&[2, 3, 4], 5);
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let s = tape.softmax(v, 1).unwrap();
    let out = tape.value(s);
    for o in 0..2 {
        for j in 0..4 {
            let total: f64 = (0..3).map(|i| out.data()[(o * 3 + i) * 4 + j]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 5], 3.7));
    let g = tape.leaf(Tensor::full(&[5], 1.0));
    let b = tape.leaf(Tensor::zeros(&[5]));
    let y = tape.layer_norm(x, g, b).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn embedding_lookup_of_identity_is_one_hot() {
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    let mut tape = Tape::new();
    let t = tape.leaf(eye);
    let e = tape.embedding_lookup(t, &[2]).unwrap();
    assert_eq!(tape.value(e).data(), &[0.0, 0.0, 1.0, 0.0]);
    assert!(matches!(
        tape.embedding_lookup(t, &[4]),
        Err(TensorError::IndexOutOfRange { index: 4, size: 4, .. })
    ));
}

#[test]
fn backward_trivial_losses() {
    let w0 = rand_t(&[2, 3], 9);
    let mut tape = Tape::new();
    let w = tape.leaf(w0.clone());
    let s = tape.sum(w).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(w).unwrap().data().iter().all(|g| *g == 1.0));

    let mut tape = Tape::new();
    let w = tape.leaf(w0.clone());
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq).unwrap();
    let half = tape.scale(s, 0.5).unwrap();
    tape.backward(half).unwrap();
    assert_eq!(tape.grad(w).unwrap(), w0);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::zeros(&[3]));
    assert!(matches!(tape.backward(w), Err(TensorError::NonScalarLoss(_))));
    let s = tape.sum(w).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.backward(s), Err(TensorError::BackwardTwice));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1e200, 1.0]));
    assert!(matches!(tape.mul(x, x), Err(TensorError::NonFinite { op: "mul" })));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let w = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
    let p = tape.mul(c, w).unwrap();
    let s = tape.sum(p).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 2.0]);
}

const H: f64 = 1e-5;

fn assert_fd(inputs: &[Tensor], tol: f64, f: impl Fn(&mut Tape<'_>, &[Var]) -> Result<Var>) {
    let report = check_gradients(inputs, H, f).unwrap();
    assert!(report.max_rel_error() < tol, "{report:?}");
}

#[test]
fn finite_differences_elementwise_ops() {
    for seed in 0..5 {
        let a = rand_t(&[3, 4], seed);
        let b = rand_t(&[3, 4], seed + 100);
        assert_fd(&[a.clone(), b.clone()], 1e-5, |t, v| {
            let x = t.add(v[0], v[1])?;
            let y = t.mul(x, v[1])?;
            let z = t.sub(y, v[0])?;
            let z = t.scale(z, 0.7)?;
            readout(t, z)
        });
        assert_fd(std::slice::from_ref(&a), 1e-5, |t, v| {
            let r = t.relu(v[0])?;
            readout(t, r)
        });
        assert_fd(
            &[a.clone(), rand_t(&[4], seed), rand_t(&[3], seed + 1)],
            1e-5,
            |t, v| {
                let x = t.add_row_vector(v[0], v[1])?;
                let x = t.add_col_vector(x, v[2])?;
                readout(t, x)
            },
        );
        assert_fd(std::slice::from_ref(&a), 1e-5, |t, v| {
            let x = t.transpose(v[0])?;
            let x = t.reshape(x, vec![2, 6])?;
            readout(t, x)
        });
        assert_fd(&[a.clone(), b.clone()], 1e-5, |t, v| {
            let x = t.concat_rows(&[v[0], v[1], v[0]])?;
            let x = t.gather_rows(x, &[5, 0, 0, 2])?;
            readout(t, x)
        });
    }
}

#[test]
fn finite_differences_normalizing_ops() {
    for seed in 0..5 {
        let x = rand_t(&[4, 5], seed);
        assert_fd(
            &[x.clone(), rand_t(&[5], seed + 1), rand_t(&[5], seed + 2)],
            1e-5,
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                readout(t, y)
            },
        );
        for axis in 0..2 {
            assert_fd(std::slice::from_ref(&x), 1e-5, |t, v| {
                let y = t.softmax(v[0], axis)?;
                readout(t, y)
            });
            assert_fd(std::slice::from_ref(&x), 1e-5, |t, v| {
                let y = t.log_softmax(v[0], axis)?;
                readout(t, y)
            });
        }
        let mask: Vec<bool> = (0..20).map(|i| i % 3 != 1).collect();
        assert_fd(std::slice::from_ref(&x), 1e-5, |t, v| {
            let y = t.masked_log_softmax(v[0], mask.clone())?;
            let y = t.log_sum_exp_groups(y, vec![vec![0, 2], vec![5], vec![17, 18, 19]])?;
            readout(t, y)
        });
        assert_fd(std::slice::from_ref(&x), 1e-5, |t, v| {
            let y = t.segment_log_softmax(v[0], vec![0..3, 3..4, 4..20])?;
            let w: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
            t.cross_entropy_from_log_probs(y, w)
        });
        assert_fd(&[rand_t(&[6, 3], seed)], 1e-5, |t, v| {
            let y = t.embedding_lookup(v[0], &[1, 5, 1, 0])?;
            readout(t, y)
        });
    }
}

#[test]
fn finite_differences_attention() {
    for seed in 0..5 {
        let q = rand_t(&[7, 4], seed);
        let k = rand_t(&[9, 4], seed + 10);
        let v = rand_t(&[9, 4], seed + 20);
        let segments = vec![
            AttnSegment {
                queries: 0..3,
                keys: 0..3,
                causal: true,
            },
            AttnSegment {
                queries: 3..7,
                keys: 3..9,
                causal: false,
            },
        ];
        assert_fd(&[q, k, v], 1e-5, |t, vars| {
            let o = t.attention(vars[0], vars[1], vars[2], 2, segments.clone())?;
            readout(t, o)
        });
    }
}

#[test]
fn attention_with_shared_input_accumulates_all_paths() {
    let x = rand_t(&[5, 4], 3);
    assert_fd(&[x], 1e-5, |t, v| {
        let seg = vec![AttnSegment {
            queries: 0..5,
            keys: 0..5,
            causal: false,
        }];
        let o = t.attention(v[0], v[0], v[0], 1, seg)?;
        readout(t, o)
    });
}

#[test]
fn causal_attention_ignores_future_keys() {
    let q = rand_t(&[4, 4], 1);
    let k = rand_t(&[4, 4], 2);
    let v = rand_t(&[4, 4], 3);
    let run = |k: &Tensor, v: &Tensor| {
        let mut tape = Tape::new();
        let (a, b, c) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
        let seg = vec![AttnSegment {
            queries: 0..4,
            keys: 0..4,
            causal: true,
        }];
        let o = tape.attention(a, b, c, 2, seg).unwrap();
        tape.value(o).clone()
    };
    let base = run(&k, &v);
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for j in 0..4 {
        k2.data_mut()[3 * 4 + j] += 1.0;
        v2.data_mut()[3 * 4 + j] -= 2.0;
    }
    let moved = run(&k2, &v2);
    assert_eq!(&base.data()[..12], &moved.data()[..12]);
    assert_ne!(&base.data()[12..], &moved.data()[12..]);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let a = tape.leaf(rand_t(&[6, 8], 4));
        let b = tape.leaf(rand_t(&[8, 8], 5));
        let c = tape.matmul(a, b).unwrap();
        let seg = vec![AttnSegment {
            queries: 0..6,
            keys: 0..6,
            causal: false,
        }];
        let o = tape.attention(c, c, a, 2, seg).unwrap();
        tape.value(o).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_sums_to_one_at_extreme_magnitudes(xs in prop::collection::vec(-1e3f64..1e3, 1..12)) {
        let n = xs.len();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(xs));
        let s = tape.softmax(x, 0).unwrap();
        let total: f64 = tape.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(tape.value(s).data().iter().all(|p| (0.0..=1.0).contains(p)));
        let ls = tape.log_softmax(x, 0).unwrap();
        let total: f64 = tape.value(ls).data().iter().map(|l| l.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12 * n as f64);
    }
}

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_param(name: &str, r: usize, c: usize, seed: u64) -> Parameter<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Parameter::new(name, Tensor::randn(r, c, 1.0, &mut rng))
}

/// Reduces an `[r×c]` output to a scalar with fixed random weights so every
/// output component contributes a distinct adjoint.
fn weighted_sum(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> crate::error::Result<Var> {
    let [r, c] = tape.value(y).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::randn(r, c, 1.0, &mut rng));
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

const TOL: f64 = 1e-4;

fn assert_grad_ok(report: &GradCheckReport) {
    assert!(report.passes(TOL), "{report:#?}");
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(1, 2));
    let y = tape.softmax_rows(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn identity_matmul_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::randn(4, 3, 1.0, &mut rng);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(4));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn cross_entropy_of_certain_prediction_is_zero() {
    let mut tape = Tape::<f64>::new();
    // exp(-800) underflows to exactly 0, so p(target) = 1.
    let logits = tape.constant(Tensor::from_f64(1, 3, &[0.0, 800.0, 0.0]).unwrap());
    let loss = tape
        .cross_entropy(
            logits,
            vec![Pick {
                row: 0,
                target: 1,
                weight: 1.0,
            }],
        )
        .unwrap();
    assert_eq!(tape.value(loss).data()[0], 0.0);
}

#[test]
fn shape_mismatch_is_reported() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(2, 3));
    let b = tape.constant(Tensor::zeros(2, 3));
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    let b = tape_const(&mut tape, 3, 2);
    assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
}

fn tape_const(tape: &mut Tape<'_, f64>, r: usize, c: usize) -> Var {
    tape.constant(Tensor::zeros(r, c))
}

#[test]
fn overflow_is_an_error_not_a_silent_inf() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::full(1, 2, 3e38f32));
    assert!(matches!(tape.add(a, a), Err(Error::NonFinite { op: "add" })));
}

#[test]
fn gradcheck_matmul_variants() {
    let a = rand_param("a", 3, 4, 1);
    let b = rand_param("b", 4, 2, 2);
    let bt = rand_param("bt", 2, 4, 3);
    let r = check_gradients(&[a.clone(), b], 1e-5, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 10)
    })
    .unwrap();
    assert_grad_ok(&r);
    let r = check_gradients(&[a, bt], 1e-5, |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        weighted_sum(t, y, 11)
    })
    .unwrap();
    assert_grad_ok(&r);
}

#[test]
fn gradcheck_elementwise_and_bias() {
    let a = rand_param("a", 3, 4, 4);
    let b = rand_param("b", 3, 4, 5);
    let bias = rand_param("bias", 1, 4, 6);
    let s = rand_param("s", 3, 1, 7);
    let r = check_gradients(&[a, b, bias, s], 1e-5, |t, v| {
        let x = t.mul(v[0], v[1])?;
        let x = t.add(x, v[0])?;
        let x = t.add_row_bias(x, v[2])?;
        let x = t.row_scale(x, v[3])?;
        let x = t.scale(x, 0.7)?;
        weighted_sum(t, x, 12)
    })
    .unwrap();
    assert_grad_ok(&r);
}

#[test]
fn gradcheck_nonlinearities() {
    let a = rand_param("a", 2, 5, 8);
    let r = check_gradients(&[a], 1e-5, |t, v| {
        let g = t.gelu(v[0])?;
        let s = t.sigmoid(v[0])?;
        let x = t.add(g, s)?;
        weighted_sum(t, x, 13)
    })
    .unwrap();
    assert_grad_ok(&r);
}

#[test]
fn gradcheck_layer_norm() {
    let x = rand_param("x", 3, 6, 9);
    let g = rand_param("gamma", 1, 6, 14);
    let b = rand_param("beta", 1, 6, 15);
    let r = check_gradients(&[x, g, b], 1e-5, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, 16)
    })
    .unwrap();
    assert_grad_ok(&r);
}

#[test]
fn gradcheck_softmax_and_masked_softmax() {
    let a = rand_param("a", 3, 4, 17);
    let r = check_gradients(&[a], 1e-5, |t, v| {
        let y = t.softmax_rows(v[0])?;
        let z = t.masked_softmax(v[0], vec![1, 3, 4])?;
        let s = t.add(y, z)?;
        weighted_sum(t, s, 18)
    })
    .unwrap();
    assert_grad_ok(&r);
}

#[test]
fn gradcheck_attention() {
    let q = rand_param("q", 3, 4, 19);
    let k = rand_param("k", 5, 4, 20);
    let vv = rand_param("v", 5, 4, 21);
    let r = check_gradients(&[q, k, vv], 1e-5, |t, v| {
        let y = t.attention(v[0], v[1], v[2], 2, vec![3, 4, 5])?;
        weighted_sum(t, y, 22)
    })
    .unwrap();
    assert_grad_ok(&r);
}

#[test]
fn attention_matches_unfused_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let q = Tensor::<f64>::randn(3, 4, 1.0, &mut rng);
    let k = Tensor::<f64>::randn(4, 4, 1.0, &mut rng);
    let v = Tensor::<f64>::randn(4, 4, 1.0, &mut rng);
    let valid = vec![2, 3, 4];
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.constant(q), t.constant(k), t.constant(v));
    let fused = t.attention(qv, kv, vv, 2, valid.clone()).unwrap();
    let mut heads = Vec::new();
    for h in 0..2 {
        let qh = t.slice_cols(qv, h * 2, 2).unwrap();
        let kh = t.slice_cols(kv, h * 2, 2).unwrap();
        let vh = t.slice_cols(vv, h * 2, 2).unwrap();
        let s = t.matmul_nt(qh, kh).unwrap();
        let s = t.scale(s, 1.0 / 2f64.sqrt()).unwrap();
        let p = t.masked_softmax(s, valid.clone()).unwrap();
        heads.push(t.matmul(p, vh).unwrap());
    }
    let unfused = t.concat_cols(&heads).unwrap();
    assert!(t.value(fused).max_abs_diff(t.value(unfused)) < 1e-12);
}

#[test]
fn gradcheck_indexing_ops() {
    let table = rand_param("table", 6, 3, 24);
    let other = rand_param("other", 2, 3, 25);
    let r = check_gradients(&[table, other], 1e-5, |t, v| {
        let e = t.embedding(v[0], &[4, 1, 4, 0])?;
        let g = t.gather_rows(e, &[3, 0])?;
        let c = t.concat_rows(g, v[1])?;
        let s = t.scatter_add_rows(c, &[1, 4, 1, 2], 5)?;
        let left = t.slice_cols(s, 0, 2)?;
        let right = t.slice_cols(s, 2, 1)?;
        let back = t.concat_cols(&[right, left])?;
        weighted_sum(t, back, 26)
    })
    .unwrap();
    assert_grad_ok(&r);
}

#[test]
fn gradcheck_cross_entropy() {
    let logits = rand_param("logits", 4, 5, 27);
    let r = check_gradients(&[logits], 1e-5, |t, v| {
        t.cross_entropy(
            v[0],
            vec![
                Pick {
                    row: 0,
                    target: 3,
                    weight: 0.5,
                },
                Pick {
                    row: 2,
                    target: 0,
                    weight: 1.5,
                },
                Pick {
                    row: 3,
                    target: 4,
                    weight: 1.0,
                },
            ],
        )
    })
    .unwrap();
    assert_grad_ok(&r);
}

#[test]
fn forward_ops_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let x = Tensor::<f32>::randn(5, 8, 1.0, &mut rng);
        let w = Tensor::<f32>::randn(8, 8, 1.0, &mut rng);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x), t.constant(w));
        let y = t.matmul(xv, wv).unwrap();
        let y = t.gelu(y).unwrap();
        let y = t.attention(y, y, y, 2, vec![1, 2, 3, 4, 5]).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gather_then_scatter_restores_disjoint_rows(
        rows in 1usize..12,
        cols in 1usize..5,
        picks in proptest::collection::vec(any::<bool>(), 12),
        seed in any::<u64>(),
    ) {
        let idx: Vec<usize> = (0..rows).filter(|&i| picks[i]).collect();
        prop_assume!(!idx.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(rows, cols, 1.0, &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let g = t.gather_rows(xv, &idx).unwrap();
        let s = t.scatter_add_rows(g, &idx, rows).unwrap();
        let out = t.value(s);
        for r in 0..rows {
            if idx.contains(&r) {
                prop_assert_eq!(out.row_slice(r), x.row_slice(r));
            } else {
                prop_assert!(out.row_slice(r).iter().all(|&v| v == 0.0));
            }
        }
    }
}

mod common;

use common::gradcheck::{cases, max_rel_error};
use proptest::prelude::*;
use unitrans_core::numerics::{Adam, AdamConfig, LrSchedule, ParamStore, Tape, Tensor};
use unitrans_core::Error;

fn t2(rows: usize, cols: usize, data: &[f32]) -> Tensor {
    Tensor::new(&[rows, cols], data.to_vec()).unwrap()
}

#[test]
fn finite_difference_gradients_all_ops() {
    let mut checked = 0;
    for seed in 0..100 {
        for case in cases(seed) {
            let err = max_rel_error(&case, 1e-3, seed);
            assert!(err < 1e-3, "{}: max relative error {err:.2e}", case.name);
            checked += 1;
        }
    }
    assert!(checked >= 100 * 15);
}

#[test]
fn matmul_identity_and_dot() {
    let mut tape = Tape::new();
    let i2 = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let p = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t2(1, 2, &[1.0, 2.0]));
    let b = tape.constant(t2(2, 1, &[3.0, 4.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_grad_of_sum_is_ones_times_b_transpose() {
    // d sum(A·B) / dA = ones(3×2) · Bᵀ
    let a = Tensor::from_fn(&[3, 4], |i| (i as f32 * 0.37).sin())
        .unwrap()
        .with_grad();
    let b = Tensor::from_fn(&[4, 2], |i| (i as f32 * 0.91).cos()).unwrap();
    let mut tape = Tape::new();
    let av = tape.leaf(&a);
    let bv = tape.leaf(&b);
    let c = tape.matmul(av, bv).unwrap();
    let loss = tape.sum(c);
    tape.backward(loss).unwrap();
    let g = tape.grad(av).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expected = b.data()[k * 2] + b.data()[k * 2 + 1];
            assert!((g[i * 4 + k] - expected).abs() < 1e-6);
        }
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[4], vec![0.0; 4]).unwrap());
    let y = tape.softmax(x).unwrap();
    assert!(tape.value(y).iter().all(|&p| (p - 0.25).abs() < 1e-7));

    let c = 3.7f32;
    let x = tape.constant(Tensor::new(&[2], vec![c, c + 2f32.ln()]).unwrap());
    let y = tape.softmax(x).unwrap();
    assert!((tape.value(y)[0] - 1.0 / 3.0).abs() < 1e-6);
    assert!((tape.value(y)[1] - 2.0 / 3.0).abs() < 1e-6);

    let x = tape.constant(Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap());
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y), &[0.5, 0.5]);
}

#[test]
fn softmax_rejects_non_finite_input() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1.0));
    let big = tape.scale(x, f32::INFINITY);
    assert!(matches!(tape.softmax(big), Err(Error::NonFinite(_))));
}

fn ln(x: f64) -> f64 {
    x.ln()
}

#[test]
fn label_smoothed_ce_hand_oracle() {
    // 0.8·(−ln 0.7) + 0.2·(−¼·(ln 0.7 + 3 ln 0.1))
    let oracle = 0.8 * -ln(0.7) + 0.2 * -(0.25 * (ln(0.7) + 3.0 * ln(0.1)));
    let probs = [0.7f32, 0.1, 0.1, 0.1];
    let mut tape = Tape::new();
    let logits = tape.constant(t2(1, 4, &probs.map(f32::ln)));
    let loss = tape.label_smoothed_ce(logits, &[0], 0.2).unwrap();
    let got = f64::from(tape.scalar_value(loss).unwrap());
    assert!((got - oracle).abs() < 1e-5, "{got} vs {oracle}");
}

#[test]
fn label_smoothed_ce_uniform_prediction_is_ln_v() {
    for alpha in [0.0, 0.2, 0.7] {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 5]));
        let loss = tape.label_smoothed_ce(logits, &[0, 4, 2], alpha).unwrap();
        assert!((tape.scalar_value(loss).unwrap() - 5f32.ln()).abs() < 1e-6);
    }
}

#[test]
fn label_smoothed_ce_errors() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        tape.label_smoothed_ce(logits, &[0, 3], 0.2),
        Err(Error::Index { index: 3, .. })
    ));
    assert!(matches!(
        tape.label_smoothed_ce(logits, &[0, 1], 1.0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        tape.label_smoothed_ce(logits, &[0, 1], -0.1),
        Err(Error::Config(_))
    ));
}

/// Plain cross-entropy written out independently with the same evaluation order.
fn plain_ce(logits: &[f32], v: usize, targets: &[usize]) -> f32 {
    let mut total = 0.0f32;
    for (i, &y) in targets.iter().enumerate() {
        let row = &logits[i * v..(i + 1) * v];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f32>().ln();
        total += lse - row[y];
    }
    total / targets.len() as f32
}

proptest! {
    #[test]
    fn zero_smoothing_is_plain_ce_bitwise(
        data in proptest::collection::vec(-5.0f32..5.0, 12),
        targets in proptest::collection::vec(0usize..4, 3),
    ) {
        let mut tape = Tape::new();
        let logits = tape.constant(t2(3, 4, &data));
        let loss = tape.label_smoothed_ce(logits, &targets, 0.0).unwrap();
        prop_assert_eq!(tape.scalar_value(loss).unwrap().to_bits(), plain_ce(&data, 4, &targets).to_bits());
    }

    #[test]
    fn softmax_normalised_and_shift_invariant(
        data in proptest::collection::vec(-20.0f32..20.0, 1..16),
        shift in -50.0f32..50.0,
    ) {
        let n = data.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[n], data.clone()).unwrap());
        let y = tape.softmax(x).unwrap();
        let shifted = tape.constant(Tensor::new(&[n], data.iter().map(|v| v + shift).collect()).unwrap());
        let ys = tape.softmax(shifted).unwrap();
        let sum: f32 = tape.value(y).iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(tape.value(y).iter().all(|&p| p >= 0.0));
        for (a, b) in tape.value(y).iter().zip(tape.value(ys)) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn max_pool_examples() {
    let mut tape = Tape::new();
    let single = tape.constant(t2(1, 3, &[0.5, -1.0, 2.0]));
    let p = tape.max_pool_time(single).unwrap();
    assert_eq!(tape.value(p), &[0.5, -1.0, 2.0]);
    assert_eq!(tape.shape(p), &[3]);

    let x = tape.constant(t2(2, 2, &[1.0, 5.0, 3.0, 2.0]));
    let p = tape.max_pool_time(x).unwrap();
    assert_eq!(tape.value(p), &[3.0, 5.0]);
}

#[test]
fn conv1d_identity_tap() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let k = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = tape.conv1d(x, k).unwrap();
    assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn conv1d_same_padding_preserves_length() {
    let mut tape = Tape::new();
    for t in [1, 2, 7] {
        let x = tape.constant(Tensor::zeros(&[t, 3]));
        let k = tape.constant(Tensor::zeros(&[3, 3, 5]));
        let y = tape.conv1d(x, k).unwrap();
        assert_eq!(tape.shape(y), &[t, 5]);
    }
}

#[test]
fn embedding_rejects_unknown_id() {
    let mut tape = Tape::new();
    let table = tape.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(
        tape.embedding(table, &[1, 4]),
        Err(Error::Index { index: 4, .. })
    ));
    assert!(matches!(tape.embedding(table, &[]), Err(Error::EmptyInput(_))));
}

#[test]
fn backward_simple_examples() {
    let x = Tensor::from_fn(&[5], |i| i as f32 - 2.0).unwrap().with_grad();
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let s = tape.sum(xv);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(xv).unwrap(), &[1.0; 5]);

    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let sq = tape.mul(xv, xv).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    let expected: Vec<f32> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(tape.grad(xv).unwrap(), expected.as_slice());
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(&[2]).with_grad());
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn adam_ten_steps_on_square_shrink_monotonically() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::new(&[1], vec![1.0]).unwrap());
    let cfg = AdamConfig::new(LrSchedule::new(0.05, 0.05, 1).unwrap());
    let mut adam = Adam::new(cfg, &store).unwrap();
    let mut prev = 1.0f32;
    for _ in 0..10 {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let sq = tape.mul(b[id], b[id]).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        store.accumulate_grads(&tape, &b).unwrap();
        adam.step(&mut store).unwrap();
        let p = store.get(id).data()[0].abs();
        assert!(p < prev, "{p} !< {prev}");
        prev = p;
    }
}

#[test]
fn same_ops_same_bits() {
    let run = || {
        let mut total = Vec::new();
        for case in cases(7) {
            let mut tape = Tape::new();
            let vars: Vec<_> = case.inputs.iter().map(|t| tape.leaf(t)).collect();
            let y = (case.build)(&mut tape, &vars).unwrap();
            total.extend(tape.value(y).iter().map(|v| v.to_bits()));
        }
        total
    };
    assert_eq!(run(), run());
}

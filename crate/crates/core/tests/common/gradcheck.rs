//! Central finite-difference oracle for the autodiff tape, plus a catalogue
//! of randomized cases covering every differentiable primitive.
//!
//! Shared between the core test suite and the acceptance suite.

#![allow(dead_code)]

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unitrans_core::numerics::{Segments, Tape, Tensor, Var};
use unitrans_core::Result;

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

/// Evaluates `sum(weights ∘ build(inputs))` with nothing tracked.
fn forward(case: &Case, inputs: &[Tensor], weights: &[f32]) -> f64 {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let y = (case.build)(&mut tape, &vars).expect("case forward");
    tape.value(y)
        .iter()
        .zip(weights)
        .map(|(a, b)| f64::from(*a) * f64::from(*b))
        .sum()
}

fn output_len(case: &Case) -> usize {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t)).collect();
    let y = (case.build)(&mut tape, &vars).expect("case forward");
    tape.value(y).len()
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1)` over all
/// input elements, with central differences of step `h`.
pub fn max_rel_error(case: &Case, h: f32, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let weights: Vec<f32> = (0..output_len(case)).map(|_| rng.random_range(-1.0f32..1.0)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let y = (case.build)(&mut tape, &vars).expect("case forward");
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::new(&shape_or_scalar(&shape), weights.clone()).unwrap());
    let y = if shape.is_empty() {
        tape.reshape(y, &[1]).unwrap()
    } else {
        y
    };
    let prod = tape.mul(y, w).expect("weighting");
    let loss = tape.sum(prod);
    tape.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    for (i, input) in case.inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        for j in 0..input.len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (forward(case, &plus, &weights) - forward(case, &minus, &weights)) / (2.0 * f64::from(h));
            let a = f64::from(analytic[j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

fn shape_or_scalar(shape: &[usize]) -> Vec<usize> {
    if shape.is_empty() {
        vec![1]
    } else {
        shape.to_vec()
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale)).unwrap()
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(0.05f32..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
    .unwrap()
}

/// Columns are shuffled, well-separated levels so each maximum is unique.
fn separated_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    for c in 0..cols {
        let mut levels: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            levels.swap(i, rng.random_range(0..=i));
        }
        for r in 0..rows {
            data[r * cols + c] = levels[r] as f32 * 0.1 + rng.random_range(-0.01f32..0.01);
        }
    }
    Tensor::new(&[rows, cols], data).unwrap()
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// All op families, instantiated with shapes drawn from `seed`.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, inputs: Vec<Tensor>, build: Build| {
        out.push(Case {
            name: format!("{name}/seed{seed}"),
            inputs,
            build,
        })
    };

    let (m, k, n) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 4), dims(&mut rng, 1, 4));
    push(
        "matmul",
        vec![rand_tensor(&mut rng, &[m, k], 1.0), rand_tensor(&mut rng, &[k, n], 1.0)],
        Box::new(|t, v| t.matmul(v[0], v[1])),
    );

    let (r, c) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 5));
    push(
        "add_mul_scale",
        vec![rand_tensor(&mut rng, &[r, c], 1.0), rand_tensor(&mut rng, &[r, c], 1.0)],
        Box::new(|t, v| {
            let s = t.add(v[0], v[1])?;
            let p = t.mul(s, v[1])?;
            Ok(t.scale(p, -1.5))
        }),
    );
    push(
        "add_row",
        vec![rand_tensor(&mut rng, &[r, c], 1.0), rand_tensor(&mut rng, &[c], 1.0)],
        Box::new(|t, v| t.add_row(v[0], v[1])),
    );
    push(
        "relu",
        vec![away_from_zero(&mut rng, &[r, c])],
        Box::new(|t, v| Ok(t.relu(v[0]))),
    );
    push(
        "softmax",
        vec![rand_tensor(&mut rng, &[r, c], 2.0)],
        Box::new(|t, v| t.softmax(v[0])),
    );
    // Rows need a spread well above the step size: with near-equal entries the
    // normalisation has curvature on the scale of sqrt(eps) and differences
    // stop approximating the derivative.
    let c2 = dims(&mut rng, 2, 6);
    let ln_input = Tensor::from_fn(&[r, c2], |i| (i % c2) as f32 * 0.4 + rng.random_range(-0.15f32..0.15)).unwrap();
    push(
        "layer_norm",
        vec![
            ln_input,
            rand_tensor(&mut rng, &[c2], 1.0),
            rand_tensor(&mut rng, &[c2], 1.0),
        ],
        Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
    );

    let lens: Vec<usize> = (0..dims(&mut rng, 1, 3)).map(|_| dims(&mut rng, 1, 4)).collect();
    let total: usize = lens.iter().sum();
    let (cin, cout) = (dims(&mut rng, 1, 3), dims(&mut rng, 1, 3));
    let taps = [1, 3, 5][rng.random_range(0..3usize)];
    let segs = Segments::from_lengths(&lens).unwrap();
    {
        let segs = segs.clone();
        push(
            "conv1d",
            vec![
                rand_tensor(&mut rng, &[total, cin], 1.0),
                rand_tensor(&mut rng, &[taps, cin, cout], 1.0),
            ],
            Box::new(move |t, v| t.conv1d_segments(v[0], v[1], &segs)),
        );
    }

    let (vocab, d) = (dims(&mut rng, 2, 6), dims(&mut rng, 1, 4));
    let ids: Vec<usize> = (0..dims(&mut rng, 1, 6)).map(|_| rng.random_range(0..vocab)).collect();
    push(
        "embedding",
        vec![rand_tensor(&mut rng, &[vocab, d], 1.0)],
        Box::new(move |t, v| t.embedding(v[0], &ids)),
    );

    {
        let segs = segs.clone();
        let (rows, cols) = (total, dims(&mut rng, 1, 4));
        let mut data = Vec::with_capacity(rows * cols);
        // Separate maxima within each segment.
        let mut tensors = Vec::new();
        for s in 0..segs.count() {
            tensors.push(separated_columns(&mut rng, segs.len_of(s), cols));
        }
        for t in &tensors {
            data.extend_from_slice(t.data());
        }
        push(
            "max_pool",
            vec![Tensor::new(&[rows, cols], data).unwrap()],
            Box::new(move |t, v| t.max_pool_segments(v[0], &segs)),
        );
    }

    let heads = dims(&mut rng, 1, 2);
    let dm = heads * dims(&mut rng, 1, 3);
    let klens: Vec<usize> = lens.iter().map(|_| dims(&mut rng, 1, 4)).collect();
    let ktotal: usize = klens.iter().sum();
    let ks = Segments::from_lengths(&klens).unwrap();
    {
        let (qs, ks) = (segs.clone(), ks.clone());
        push(
            "cross_attention",
            vec![
                rand_tensor(&mut rng, &[total, dm], 1.0),
                rand_tensor(&mut rng, &[ktotal, dm], 1.0),
                rand_tensor(&mut rng, &[ktotal, dm], 1.0),
            ],
            Box::new(move |t, v| t.attention(v[0], v[1], v[2], &qs, &ks, heads, false)),
        );
    }
    {
        let qs = segs.clone();
        push(
            "causal_attention",
            vec![
                rand_tensor(&mut rng, &[total, dm], 1.0),
                rand_tensor(&mut rng, &[total, dm], 1.0),
                rand_tensor(&mut rng, &[total, dm], 1.0),
            ],
            Box::new(move |t, v| t.attention(v[0], v[1], v[2], &qs, &qs, heads, true)),
        );
    }

    let (tt, vv) = (dims(&mut rng, 1, 4), dims(&mut rng, 2, 6));
    let targets: Vec<usize> = (0..tt).map(|_| rng.random_range(0..vv)).collect();
    let alpha = [0.0f32, 0.1, 0.2, 0.5][rng.random_range(0..4usize)];
    push(
        "label_smoothed_ce",
        vec![rand_tensor(&mut rng, &[tt, vv], 2.0)],
        Box::new(move |t, v| t.label_smoothed_ce(v[0], &targets, alpha)),
    );

    push(
        "l2_normalize",
        vec![away_from_zero(&mut rng, &[r, c])],
        Box::new(|t, v| t.l2_normalize_rows(v[0])),
    );
    let target: Vec<f32> = (0..r * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    push(
        "mse",
        vec![rand_tensor(&mut rng, &[r, c], 1.0)],
        Box::new(move |t, v| t.mse(v[0], &target)),
    );
    let idx: Vec<usize> = (0..dims(&mut rng, 1, 5)).map(|_| rng.random_range(0..r)).collect();
    push(
        "gather_reshape_mean",
        vec![rand_tensor(&mut rng, &[r, c], 1.0)],
        Box::new(move |t, v| {
            let g = t.gather_rows(v[0], &idx)?;
            let n = t.shape(g).iter().product::<usize>();
            let flat = t.reshape(g, &[n])?;
            let m = t.mean(flat);
            let s = t.reshape(m, &[1])?;
            let both = t.gather_rows(v[0], &[0])?;
            let first = t.reshape(both, &[c])?;
            let scaled = t.scale(first, 0.5);
            let total = t.sum(scaled);
            let total = t.reshape(total, &[1])?;
            t.add(s, total)
        }),
    );

    // A pre-norm attention block feeding a pooled, normalized readout and a
    // smoothed cross-entropy head.
    let d = 4;
    let blens: Vec<usize> = (0..2).map(|_| dims(&mut rng, 1, 3)).collect();
    let btotal: usize = blens.iter().sum();
    let bsegs = Segments::from_lengths(&blens).unwrap();
    let btargets: Vec<usize> = (0..btotal).map(|_| rng.random_range(0..3)).collect();
    push(
        "composite_block",
        vec![
            rand_tensor(&mut rng, &[btotal, d], 1.0),
            rand_tensor(&mut rng, &[d], 1.0),
            rand_tensor(&mut rng, &[d], 0.5),
            rand_tensor(&mut rng, &[d, d], 0.7),
            rand_tensor(&mut rng, &[d, d], 0.7),
            rand_tensor(&mut rng, &[d, d], 0.7),
            rand_tensor(&mut rng, &[d, 3], 0.7),
            rand_tensor(&mut rng, &[3, d, d], 0.5),
        ],
        Box::new(move |t, v| {
            let h = t.layer_norm(v[0], v[1], v[2])?;
            let q = t.matmul(h, v[3])?;
            let k = t.matmul(h, v[4])?;
            let vv = t.matmul(h, v[5])?;
            let a = t.attention(q, k, vv, &bsegs, &bsegs, 2, true)?;
            let x = t.add(v[0], a)?;
            let conv = t.conv1d_segments(x, v[7], &bsegs)?;
            let x = t.add(x, conv)?;
            let logits = t.matmul(x, v[6])?;
            let ce = t.label_smoothed_ce(logits, &btargets, 0.2)?;
            let pooled = t.max_pool_segments(x, &bsegs)?;
            let unit = t.l2_normalize_rows(pooled)?;
            let s = t.sum(unit);
            let total = t.add(ce, s)?;
            t.reshape(total, &[1])
        }),
    );
    out
}

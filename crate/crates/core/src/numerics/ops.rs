//! Differentiable primitives recorded on a [`Tape`].

use super::gemm::{gemm, View, ViewMut};
use super::tape::{grad_buf, Node, Tape, Var};
use super::tensor::{Segments, Tensor};
use crate::error::{Error, Result};

pub(super) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f32,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        cols: Vec<f32>,
        segs: Segments,
        taps: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        qs: Segments,
        ks: Segments,
        heads: usize,
        probs: Vec<f32>,
    },
    SmoothedCe {
        logits: Var,
        targets: Vec<usize>,
        alpha: f32,
        probs: Vec<f32>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f32>,
    },
    Mse {
        x: Var,
        target: Vec<f32>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let total: usize = shape.iter().product();
    (total / cols, cols)
}

fn check_finite(op: &'static str, xs: &[f32]) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

const LN_EPS: f32 = 1e-5;

impl Tape {
    fn node_shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node_shape(a), self.node_shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::rm(&self.nodes[a.0].value, 0, m, k, k),
            View::rm(&self.nodes[b.0].value, 0, k, n, n),
            0.0,
            ViewMut::rm(&mut out, 0, m, n, n),
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, ng, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.node_shape(a) != self.node_shape(b) {
            return Err(Error::shape("add", self.node_shape(a), self.node_shape(b)));
        }
        let out: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(&[a, b]);
        let shape = self.node_shape(a).to_vec();
        Ok(self.push(shape, out, ng, Op::Add { a, b }))
    }

    /// Adds a length-`c` vector to every row of an `[r×c]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = matrix_dims(self.node_shape(x));
        if self.nodes[bias.0].value.len() != c {
            return Err(Error::shape("add_row", self.node_shape(x), self.node_shape(bias)));
        }
        let b = &self.nodes[bias.0].value;
        let out: Vec<f32> = self.nodes[x.0]
            .value
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, w)| v + w))
            .collect();
        let ng = self.ng(&[x, bias]);
        let shape = self.node_shape(x).to_vec();
        Ok(self.push(shape, out, ng, Op::AddRow { x, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.node_shape(a) != self.node_shape(b) {
            return Err(Error::shape("mul", self.node_shape(a), self.node_shape(b)));
        }
        let out: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(&[a, b]);
        let shape = self.node_shape(a).to_vec();
        Ok(self.push(shape, out, ng, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| v * s).collect();
        let ng = self.ng(&[x]);
        let shape = self.node_shape(x).to_vec();
        self.push(shape, out, ng, Op::Scale { x, s })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| v.max(0.0)).collect();
        let ng = self.ng(&[x]);
        let shape = self.node_shape(x).to_vec();
        self.push(shape, out, ng, Op::Relu { x })
    }

    /// Last-axis softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = matrix_dims(self.node_shape(x));
        let xs = &self.nodes[x.0].value;
        check_finite("softmax", xs)?;
        let mut out = xs.clone();
        out.chunks_mut(c).for_each(softmax_in_place);
        let ng = self.ng(&[x]);
        let shape = self.node_shape(x).to_vec();
        Ok(self.push(shape, out, ng, Op::Softmax { x }))
    }

    /// Per-row layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = matrix_dims(self.node_shape(x));
        if self.nodes[gain.0].value.len() != c || self.nodes[bias.0].value.len() != c {
            return Err(Error::shape("layer_norm", self.node_shape(x), self.node_shape(gain)));
        }
        let xs = &self.nodes[x.0].value;
        let (g, b) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let ng = self.ng(&[x, gain, bias]);
        let shape = self.node_shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            ng,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Stride-1, same-padded 1-D convolution of `[T×C_in]` with a `[K×C_in×C_out]` kernel.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let t = matrix_dims(self.node_shape(x)).0;
        let segs = Segments::single(t)?;
        self.conv1d_segments(x, kernel, &segs)
    }

    /// [`Tape::conv1d`] applied independently to each segment of a packed input.
    pub fn conv1d_segments(&mut self, x: Var, kernel: Var, segs: &Segments) -> Result<Var> {
        let (n, cin) = matrix_dims(self.node_shape(x));
        let ks = self.node_shape(kernel);
        if ks.len() != 3 || ks[1] != cin || ks[0] % 2 == 0 || segs.total() != n {
            return Err(Error::shape("conv1d", self.node_shape(x), ks));
        }
        let (taps, cout) = (ks[0], ks[2]);
        let pad = taps / 2;
        let xs = &self.nodes[x.0].value;
        let width = taps * cin;
        let mut cols = vec![0.0; n * width];
        for range in segs.iter() {
            let (start, len) = (range.start, range.len());
            for t in 0..len {
                for j in 0..taps {
                    let src = t as isize + j as isize - pad as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let from = (start + src as usize) * cin;
                    let to = (start + t) * width + j * cin;
                    cols[to..to + cin].copy_from_slice(&xs[from..from + cin]);
                }
            }
        }
        let mut out = vec![0.0; n * cout];
        gemm(
            1.0,
            View::rm(&cols, 0, n, width, width),
            View::rm(&self.nodes[kernel.0].value, 0, width, cout, cout),
            0.0,
            ViewMut::rm(&mut out, 0, n, cout, cout),
        );
        let ng = self.ng(&[x, kernel]);
        Ok(self.push(
            vec![n, cout],
            out,
            ng,
            Op::Conv1d {
                x,
                kernel,
                cols,
                segs: segs.clone(),
                taps,
            },
        ))
    }

    /// Rows of a `[V×D]` table selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("embedding lookup".into()));
        }
        let (v, d) = matrix_dims(self.node_shape(table));
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            ng,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Per-dimension maximum over the time axis of a `[T×D]` input, giving `[D]`.
    pub fn max_pool_time(&mut self, x: Var) -> Result<Var> {
        let t = matrix_dims(self.node_shape(x)).0;
        if t == 0 {
            return Err(Error::EmptyInput("max_pool_time".into()));
        }
        let segs = Segments::single(t)?;
        let pooled = self.max_pool_segments(x, &segs)?;
        let d = self.node_shape(pooled)[1];
        self.reshape(pooled, &[d])
    }

    /// Time max-pool of each segment of a packed `[N×D]` input, giving `[B×D]`.
    pub fn max_pool_segments(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        let (n, d) = matrix_dims(self.node_shape(x));
        if segs.total() != n {
            return Err(Error::shape("max_pool", self.node_shape(x), &[segs.total()]));
        }
        let xs = &self.nodes[x.0].value;
        let b = segs.count();
        let mut out = vec![f32::NEG_INFINITY; b * d];
        let mut argmax = vec![0usize; b * d];
        for (s, range) in segs.iter().enumerate() {
            for r in range {
                for j in 0..d {
                    let v = xs[r * d + j];
                    if v > out[s * d + j] {
                        out[s * d + j] = v;
                        argmax[s * d + j] = r;
                    }
                }
            }
        }
        check_finite("max_pool", &out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(vec![b, d], out, ng, Op::MaxPool { x, argmax }))
    }

    /// Multi-head scaled dot-product attention between matching segments of
    /// packed queries `[Nq×D]` and keys/values `[Nk×D]`. With `causal`, query
    /// row `i` of a segment sees key rows `0..=i` of the same segment only.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        qs: &Segments,
        ks: &Segments,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (nq, d) = matrix_dims(self.node_shape(q));
        let (nk, dk) = matrix_dims(self.node_shape(k));
        if dk != d
            || self.node_shape(v) != self.node_shape(k)
            || qs.total() != nq
            || ks.total() != nk
            || qs.count() != ks.count()
            || heads == 0
            || d % heads != 0
        {
            return Err(Error::shape("attention", self.node_shape(q), self.node_shape(k)));
        }
        if causal && (0..qs.count()).any(|s| qs.len_of(s) != ks.len_of(s)) {
            return Err(Error::Usage(
                "causal attention needs equal query and key lengths".into(),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let total: usize = (0..qs.count()).map(|s| qs.len_of(s) * ks.len_of(s)).sum::<usize>() * heads;
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; nq * d];
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mut off = 0;
        for s in 0..qs.count() {
            let (q0, tq) = (qs.range(s).start, qs.len_of(s));
            let (k0, tk) = (ks.range(s).start, ks.len_of(s));
            for h in 0..heads {
                let p = &mut probs[off..off + tq * tk];
                gemm(
                    scale,
                    View::rm(qv, q0 * d + h * dh, tq, dh, d),
                    View::rm(kv, k0 * d + h * dh, tk, dh, d).t(),
                    0.0,
                    ViewMut::rm(p, 0, tq, tk, tk),
                );
                for (i, row) in p.chunks_mut(tk).enumerate() {
                    if causal {
                        row[i + 1..].iter_mut().for_each(|x| *x = f32::NEG_INFINITY);
                        softmax_in_place(&mut row[..=i]);
                        row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                    } else {
                        softmax_in_place(row);
                    }
                }
                gemm(
                    1.0,
                    View::rm(p, 0, tq, tk, tk),
                    View::rm(vv, k0 * d + h * dh, tk, dh, d),
                    0.0,
                    ViewMut::rm(&mut out, q0 * d + h * dh, tq, dh, d),
                );
                off += tq * tk;
            }
        }
        check_finite("attention", &out)?;
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            vec![nq, d],
            out,
            ng,
            Op::Attention {
                q,
                k,
                v,
                qs: qs.clone(),
                ks: ks.clone(),
                heads,
                probs,
            },
        ))
    }

    /// Mean over rows of `(1-α)·CE(onehot, ŷ) + α·CE(uniform, ŷ)`, with
    /// `ŷ = softmax(logits)` over the last axis.
    pub fn label_smoothed_ce(&mut self, logits: Var, targets: &[usize], alpha: f32) -> Result<Var> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "label smoothing must lie in [0, 1), got {alpha}"
            )));
        }
        let (t, v) = matrix_dims(self.node_shape(logits));
        if targets.len() != t {
            return Err(Error::shape(
                "label_smoothed_ce",
                self.node_shape(logits),
                &[targets.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::Index {
                op: "label_smoothed_ce",
                index: bad,
                bound: v,
            });
        }
        let xs = &self.nodes[logits.0].value;
        check_finite("label_smoothed_ce", xs)?;
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0f32;
        for (i, &y) in targets.iter().enumerate() {
            let row = &xs[i * v..(i + 1) * v];
            let lse = log_sum_exp(row);
            let nll = lse - row[y];
            let smooth = lse - row.iter().sum::<f32>() / v as f32;
            total += (1.0 - alpha) * nll + alpha * smooth;
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / t as f32;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            ng,
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                alpha,
                probs,
            },
        ))
    }

    /// Plain mean cross-entropy against one-hot targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.label_smoothed_ce(logits, targets, 0.0)
    }

    /// Divides each row by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix_dims(self.node_shape(x));
        let xs = &self.nodes[x.0].value;
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in xs.chunks(c) {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        check_finite("l2_normalize_rows", &out)?;
        let ng = self.ng(&[x]);
        let shape = self.node_shape(x).to_vec();
        Ok(self.push(shape, out, ng, Op::L2Normalize { x, norms }))
    }

    /// Mean squared error against a constant target of the same length.
    pub fn mse(&mut self, x: Var, target: &[f32]) -> Result<Var> {
        let xs = &self.nodes[x.0].value;
        if xs.len() != target.len() {
            return Err(Error::shape("mse", self.node_shape(x), &[target.len()]));
        }
        let loss = xs.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f32>() / xs.len() as f32;
        let ng = self.ng(&[x]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            ng,
            Op::Mse {
                x,
                target: target.to_vec(),
            },
        ))
    }

    /// Rows of a matrix selected by index, in order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        if idx.is_empty() {
            return Err(Error::EmptyInput("gather_rows".into()));
        }
        let (r, c) = matrix_dims(self.node_shape(x));
        let xs = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![idx.len(), c], out, ng, Op::Gather { x, idx: idx.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[x.0].value.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.node_shape(x), shape));
        }
        let out = self.nodes[x.0].value.clone();
        let ng = self.ng(&[x]);
        Ok(self.push(shape.to_vec(), out, ng, Op::Reshape { x }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let ng = self.ng(&[x]);
        self.push(Vec::new(), vec![s], ng, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len() as f32;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `x @ w + b` for `[N×in]` inputs.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln()
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Applies the backward rule of node `i`, adding into its inputs' gradients.
pub(super) fn backprop(nodes: &[Node], i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.as_slice();
    let shape = |v: Var| nodes[v.0].shape.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (shape(*a)[0], shape(*a)[1]);
            let n = shape(*b)[1];
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                gemm(
                    1.0,
                    View::rm(g, 0, m, n, n),
                    View::rm(val(*b), 0, k, n, n).t(),
                    1.0,
                    ViewMut::rm(ga, 0, m, k, k),
                );
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                gemm(
                    1.0,
                    View::rm(val(*a), 0, m, k, k).t(),
                    View::rm(g, 0, m, n, n),
                    1.0,
                    ViewMut::rm(gb, 0, k, n, n),
                );
            }
        }
        Op::Add { a, b } => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                add_into(gb, g);
            }
        }
        Op::AddRow { x, bias } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                add_into(gx, g);
            }
            if let Some(gb) = grad_buf(nodes, grads, *bias) {
                let c = gb.len();
                for row in g.chunks(c) {
                    add_into(gb, row);
                }
            }
        }
        Op::Mul { a, b } => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for ((d, gv), bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                    *d += gv * bv;
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for ((d, gv), av) in gb.iter_mut().zip(g).zip(val(*a)) {
                    *d += gv * av;
                }
            }
        }
        Op::Scale { x, s } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * s);
            }
        }
        Op::Relu { x } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((d, gv), y) in gx.iter_mut().zip(g).zip(&node.value) {
                    if *y > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        Op::Softmax { x } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let c = *node.shape.last().unwrap_or(&1);
                for ((dx, gy), y) in gx.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                    let dot: f32 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let c = gain_len(nodes, *gain);
            let gv = val(*gain);
            if let Some(gg) = grad_buf(nodes, grads, *gain) {
                for (gy, h) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        gg[j] += gy[j] * h[j];
                    }
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *bias) {
                for gy in g.chunks(c) {
                    add_into(gb, gy);
                }
            }
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (r, ((dx, gy), h)) in gx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..c {
                        let dh = gy[j] * gv[j];
                        mean_d += dh;
                        mean_dh += dh * h[j];
                    }
                    mean_d /= c as f32;
                    mean_dh /= c as f32;
                    for j in 0..c {
                        let dh = gy[j] * gv[j];
                        dx[j] += rstd[r] * (dh - mean_d - h[j] * mean_dh);
                    }
                }
            }
        }
        Op::Conv1d {
            x,
            kernel,
            cols,
            segs,
            taps,
        } => {
            let ks = shape(*kernel);
            let (cin, cout) = (ks[1], ks[2]);
            let width = taps * cin;
            let n = segs.total();
            if let Some(gk) = grad_buf(nodes, grads, *kernel) {
                gemm(
                    1.0,
                    View::rm(cols, 0, n, width, width).t(),
                    View::rm(g, 0, n, cout, cout),
                    1.0,
                    ViewMut::rm(gk, 0, width, cout, cout),
                );
            }
            if nodes[x.0].needs_grad {
                let mut dcols = vec![0.0; n * width];
                gemm(
                    1.0,
                    View::rm(g, 0, n, cout, cout),
                    View::rm(val(*kernel), 0, width, cout, cout).t(),
                    0.0,
                    ViewMut::rm(&mut dcols, 0, n, width, width),
                );
                let gx = grad_buf(nodes, grads, *x).expect("checked needs_grad");
                let pad = taps / 2;
                for range in segs.iter() {
                    let (start, len) = (range.start, range.len());
                    for t in 0..len {
                        for j in 0..*taps {
                            let src = t as isize + j as isize - pad as isize;
                            if src < 0 || src >= len as isize {
                                continue;
                            }
                            let to = (start + src as usize) * cin;
                            let from = (start + t) * width + j * cin;
                            add_into(&mut gx[to..to + cin], &dcols[from..from + cin]);
                        }
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(gt) = grad_buf(nodes, grads, *table) {
                let d = shape(*table)[1];
                for (row, &id) in g.chunks(d).zip(ids) {
                    add_into(&mut gt[id * d..(id + 1) * d], row);
                }
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let d = node.shape[1];
                for (o, (&r, gv)) in argmax.iter().zip(g).enumerate() {
                    gx[r * d + o % d] += gv;
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            qs,
            ks,
            heads,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), qs, ks, *heads, probs),
        Op::SmoothedCe {
            logits,
            targets,
            alpha,
            probs,
        } => {
            if let Some(gl) = grad_buf(nodes, grads, *logits) {
                let v = *shape(*logits).last().unwrap_or(&1);
                let t = targets.len();
                let scale = g[0] / t as f32;
                let uniform = alpha / v as f32;
                for (i, &y) in targets.iter().enumerate() {
                    for j in 0..v {
                        let mut d = probs[i * v + j] - uniform;
                        if j == y {
                            d -= 1.0 - alpha;
                        }
                        gl[i * v + j] += scale * d;
                    }
                }
            }
        }
        Op::L2Normalize { x, norms } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let c = *node.shape.last().unwrap_or(&1);
                for (r, ((dx, gy), y)) in gx.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)).enumerate() {
                    let dot: f32 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[j] += (gy[j] - y[j] * dot) / norms[r];
                    }
                }
            }
        }
        Op::Mse { x, target } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let scale = 2.0 * g[0] / target.len() as f32;
                for ((d, a), b) in gx.iter_mut().zip(val(*x)).zip(target) {
                    *d += scale * (a - b);
                }
            }
        }
        Op::Gather { x, idx } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let c = *node.shape.last().unwrap_or(&1);
                for (row, &i) in g.chunks(c).zip(idx) {
                    add_into(&mut gx[i * c..(i + 1) * c], row);
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                add_into(gx, g);
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}

fn gain_len(nodes: &[Node], gain: Var) -> usize {
    nodes[gain.0].value.len()
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f32>>],
    g: &[f32],
    (q, k, v): (Var, Var, Var),
    qs: &Segments,
    ks: &Segments,
    heads: usize,
    probs: &[f32],
) {
    let d = *nodes[q.0].shape.last().expect("2-D");
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let (need_q, need_k, need_v) = (nodes[q.0].needs_grad, nodes[k.0].needs_grad, nodes[v.0].needs_grad);
    let mut gq = need_q.then(|| vec![0.0; qv.len()]);
    let mut gk = need_k.then(|| vec![0.0; kv.len()]);
    let mut gv = need_v.then(|| vec![0.0; vv.len()]);
    let mut off = 0;
    let mut ds = Vec::new();
    for s in 0..qs.count() {
        let (q0, tq) = (qs.range(s).start, qs.len_of(s));
        let (k0, tk) = (ks.range(s).start, ks.len_of(s));
        for h in 0..heads {
            let p = &probs[off..off + tq * tk];
            off += tq * tk;
            let g_o = View::rm(g, q0 * d + h * dh, tq, dh, d);
            if let Some(gv) = gv.as_mut() {
                gemm(
                    1.0,
                    View::rm(p, 0, tq, tk, tk).t(),
                    g_o,
                    1.0,
                    ViewMut::rm(gv, k0 * d + h * dh, tk, dh, d),
                );
            }
            if !(need_q || need_k) {
                continue;
            }
            ds.clear();
            ds.resize(tq * tk, 0.0);
            gemm(
                1.0,
                g_o,
                View::rm(vv, k0 * d + h * dh, tk, dh, d).t(),
                0.0,
                ViewMut::rm(&mut ds, 0, tq, tk, tk),
            );
            for (row, prow) in ds.chunks_mut(tk).zip(p.chunks(tk)) {
                let dot: f32 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (x, pv) in row.iter_mut().zip(prow) {
                    *x = pv * (*x - dot);
                }
            }
            if let Some(gq) = gq.as_mut() {
                gemm(
                    scale,
                    View::rm(&ds, 0, tq, tk, tk),
                    View::rm(kv, k0 * d + h * dh, tk, dh, d),
                    1.0,
                    ViewMut::rm(gq, q0 * d + h * dh, tq, dh, d),
                );
            }
            if let Some(gk) = gk.as_mut() {
                gemm(
                    scale,
                    View::rm(&ds, 0, tq, tk, tk).t(),
                    View::rm(qv, q0 * d + h * dh, tq, dh, d),
                    1.0,
                    ViewMut::rm(gk, k0 * d + h * dh, tk, dh, d),
                );
            }
        }
    }
    for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
        if let Some(buf) = buf {
            let dst = grad_buf(nodes, grads, var).expect("needs grad");
            add_into(dst, &buf);
        }
    }
}

/// Multiplies by a fixed inverted-dropout mask; identity when `p == 0`.
pub fn dropout(tape: &mut Tape, x: Var, p: f32, rng: &mut impl rand::Rng) -> Result<Var> {
    use rand::RngExt;
    if p <= 0.0 || !tape.grad_enabled() {
        return Ok(x);
    }
    if p >= 1.0 {
        return Err(Error::Config(format!("dropout must lie in [0, 1), got {p}")));
    }
    let shape = tape.shape(x).to_vec();
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::from_fn(&shape, |_| if rng.random::<f32>() < p { 0.0 } else { keep })?;
    let m = tape.constant(mask);
    tape.mul(x, m)
}

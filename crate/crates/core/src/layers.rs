//! Transformer building blocks shared by the encoder and the translator.
//!
//! Every layer holds only [`ParamId`]s; its forward pass takes the tape and
//! the [`Bound`] handles of the owning store.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{dropout, Bound, ParamId, ParamStore, Segments, Tape, Tensor, Var};

/// Dropout state threaded through a forward pass.
pub struct Dropout {
    pub p: f32,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        dropout(tape, x, self.p, &mut self.rng)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add_weight(&format!("{name}.w"), d_in, d_out, rng),
            b: store.add_const(&format!("{name}.b"), &[d_out], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], p[self.b])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add_const(&format!("{name}.gain"), &[d], 1.0),
            bias: store.add_const(&format!("{name}.bias"), &[d], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gain], p[self.bias])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// Key and value projections of `memory`.
    pub fn kv(&self, tape: &mut Tape, p: &Bound, memory: Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(tape, p, memory)?, self.v.forward(tape, p, memory)?))
    }

    /// Attention of the queries projected from `x` over precomputed keys and
    /// values, followed by the output projection.
    #[allow(clippy::too_many_arguments)]
    pub fn attend(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        k: Var,
        v: Var,
        xs: &Segments,
        ms: &Segments,
        causal: bool,
    ) -> Result<Var> {
        let q = self.q.forward(tape, p, x)?;
        let a = tape.attention(q, k, v, xs, ms, self.heads, causal)?;
        self.o.forward(tape, p, a)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        memory: Var,
        xs: &Segments,
        ms: &Segments,
        causal: bool,
    ) -> Result<Var> {
        let (k, v) = self.kv(tape, p, memory)?;
        self.attend(tape, p, x, k, v, xs, ms, causal)
    }
}

/// Self-attention keys and values of the positions decoded so far, for one
/// sequence, row-major `[len × d]`.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.down.forward(tape, p, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone, Copy)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ffn: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, ffn, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, segs: &Segments, drop: &mut Dropout) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, h, h, segs, segs, false)?;
        let a = drop.apply(tape, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let f = self.ff.forward(tape, p, h)?;
        let f = drop.apply(tape, f)?;
        tape.add(x, f)
    }
}

/// Pre-norm block with causal self-attention, then cross-attention over a
/// memory, then a feed-forward layer.
#[derive(Debug, Clone, Copy)]
pub struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ffn: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), d, heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, ffn, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        memory: Var,
        xs: &Segments,
        ms: &Segments,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let a = self.self_attn.forward(tape, p, h, h, xs, xs, true)?;
        let a = drop.apply(tape, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let c = self.cross_attn.forward(tape, p, h, memory, xs, ms, false)?;
        let c = drop.apply(tape, c)?;
        let x = tape.add(x, c)?;
        let h = self.ln3.forward(tape, p, x)?;
        let f = self.ff.forward(tape, p, h)?;
        let f = drop.apply(tape, f)?;
        tape.add(x, f)
    }

    /// Cross-attention keys and values of a memory; constant while decoding.
    pub fn cross_kv(&self, tape: &mut Tape, p: &Bound, memory: Var) -> Result<(Var, Var)> {
        self.cross_attn.kv(tape, p, memory)
    }

    /// Advances every sequence by one position. `x` holds one new row per
    /// sequence; each cache grows by one row. Matches [`Self::forward`] on
    /// the full prefix.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        caches: &mut [&mut KvCache],
        cross_k: Var,
        cross_v: Var,
        ms: &Segments,
    ) -> Result<Var> {
        let d = tape.shape(x)[1];
        let h = self.ln1.forward(tape, p, x)?;
        let (k, v) = self.self_attn.kv(tape, p, h)?;
        for (s, cache) in caches.iter_mut().enumerate() {
            cache.k.extend_from_slice(&tape.value(k)[s * d..(s + 1) * d]);
            cache.v.extend_from_slice(&tape.value(v)[s * d..(s + 1) * d]);
        }
        let lengths: Vec<usize> = caches.iter().map(|c| c.k.len() / d).collect();
        let total: usize = lengths.iter().sum();
        let ks = tape.constant(Tensor::new(
            &[total, d],
            caches.iter().flat_map(|c| c.k.iter().copied()).collect(),
        )?);
        let vs = tape.constant(Tensor::new(
            &[total, d],
            caches.iter().flat_map(|c| c.v.iter().copied()).collect(),
        )?);
        let qs = Segments::uniform(caches.len(), 1)?;
        let a = self
            .self_attn
            .attend(tape, p, h, ks, vs, &qs, &Segments::from_lengths(&lengths)?, false)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let c = self.cross_attn.attend(tape, p, h, cross_k, cross_v, &qs, ms, false)?;
        let x = tape.add(x, c)?;
        let h = self.ln3.forward(tape, p, x)?;
        let f = self.ff.forward(tape, p, h)?;
        tape.add(x, f)
    }
}

//! Fixed-size sentence embeddings of unit sequences.
//!
//! A small transformer encodes the units, its frames are max-pooled over
//! time and projected to `dim`, and the result is L2-normalised. Training
//! regresses every utterance onto a [`TeacherAnchor`] that depends only on
//! the utterance's concepts, so realizations of one sentence in different
//! languages share a single target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Dropout, EncoderBlock, LayerNorm, Linear};
use crate::numerics::{sinusoidal_positions, Bound, ParamId, ParamStore, Segments, Tape, Tensor, Var};
use crate::seeding;
use crate::synthlang::{ConceptSentence, Corpus, LangId};
use crate::training::{fit, BatchLoss, TrainConfig, Trained};

/// Unit sequences encoded per inference tape.
const INFERENCE_CHUNK: usize = 64;

/// A pooled sentence vector. `lang` is descriptive metadata and never enters
/// any computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceEmbedding {
    pub values: Vec<f32>,
    pub lang: Option<LangId>,
}

impl SentenceEmbedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("sentence embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sentence embedding"));
        }
        Ok(Self { values, lang: None })
    }

    pub fn with_lang(mut self, lang: LangId) -> Self {
        self.lang = Some(lang);
        self
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Cosine similarity, accumulated in `f64`.
pub fn cosine(a: &SentenceEmbedding, b: &SentenceEmbedding) -> Result<f64> {
    cosine_slices(&a.values, &b.values)
}

pub fn cosine_slices(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", &[a.len()], &[b.len()]));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Language-independent regression target: the concept count vector mapped
/// through a fixed seeded matrix, then L2-normalised. Rows of the matrix are
/// orthonormal whenever `num_concepts <= dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherAnchor {
    num_concepts: usize,
    dim: usize,
    rows: Vec<f64>,
}

impl TeacherAnchor {
    pub fn new(num_concepts: usize, dim: usize, seed: u64) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        if num_concepts == 0 || dim == 0 {
            return Err(Error::Config("anchor needs positive num_concepts and dim".into()));
        }
        let mut rng = seeding::rng(seed);
        let mut rows: Vec<f64> = (0..num_concepts * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for i in 0..num_concepts {
            let (done, rest) = rows.split_at_mut(i * dim);
            let row = &mut rest[..dim];
            if i < dim {
                for prev in done.chunks(dim) {
                    let d: f64 = prev.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                    row.iter_mut().zip(prev).for_each(|(r, p)| *r -= d * p);
                }
            }
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self {
            num_concepts,
            dim,
            rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn anchor(&self, s: &ConceptSentence) -> Result<Vec<f32>> {
        if s.is_empty() {
            return Err(Error::EmptyInput("anchor of an empty sentence".into()));
        }
        let mut v = vec![0.0f64; self.dim];
        for &c in s.concepts() {
            let c = c as usize;
            if c >= self.num_concepts {
                return Err(Error::Index {
                    op: "TeacherAnchor::anchor",
                    index: c,
                    bound: self.num_concepts,
                });
            }
            let row = &self.rows[c * self.dim..(c + 1) * self.dim];
            v.iter_mut().zip(row).for_each(|(a, r)| *a += r);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(v.iter().map(|x| (x / n) as f32).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Number of distinct unit IDs accepted.
    pub vocab_size: usize,
    pub d_model: usize,
    /// Output embedding size `D`.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            dim: 64,
            layers: 2,
            heads: 4,
            ffn: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn", self.ffn),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder.heads ({}) must divide encoder.d_model ({})",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }
}

/// Transformer sentence encoder with max-pooling over time.
#[derive(Debug, Clone)]
pub struct SentenceEncoder {
    config: EncoderConfig,
    params: ParamStore,
    embed: ParamId,
    blocks: Vec<EncoderBlock>,
    ln_out: LayerNorm,
    proj: Linear,
}

impl SentenceEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeding::rng(seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let embed = params.add_scaled("embed", &[config.vocab_size, d], 1.0, &mut rng);
        let blocks = (0..config.layers)
            .map(|i| EncoderBlock::new(&mut params, &format!("block{i}"), d, config.heads, config.ffn, &mut rng))
            .collect();
        let ln_out = LayerNorm::new(&mut params, "ln_out", d);
        let proj = Linear::new(&mut params, "proj", d, config.dim, &mut rng);
        Ok(Self {
            config,
            params,
            embed,
            blocks,
            ln_out,
            proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Normalised embeddings `[B×dim]` of a batch of unit sequences.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, seqs: &[&[u32]], drop: &mut Dropout) -> Result<Var> {
        if let Some(i) = seqs.iter().position(|s| s.is_empty()) {
            return Err(Error::EmptyInput(format!("encode: sequence {i} has no units")));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let segs = Segments::from_lengths(&lengths)?;
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&u| u as usize)).collect();
        let mut x = tape.embedding(p[self.embed], &ids)?;
        if !self.blocks.is_empty() {
            // Positions enter only through attention layers, so with no
            // layers the pooled output is invariant to frame order.
            let d = self.config.d_model;
            let longest = lengths.iter().copied().max().unwrap_or(1);
            let table = sinusoidal_positions(longest, d);
            let mut pos = Vec::with_capacity(ids.len() * d);
            for &n in &lengths {
                pos.extend_from_slice(&table.data()[..n * d]);
            }
            let pos = tape.constant(Tensor::new(&[ids.len(), d], pos)?);
            x = tape.add(x, pos)?;
        }
        for block in &self.blocks {
            x = block.forward(tape, p, x, &segs, drop)?;
        }
        let x = self.ln_out.forward(tape, p, x)?;
        let pooled = tape.max_pool_segments(x, &segs)?;
        let y = self.proj.forward(tape, p, pooled)?;
        tape.l2_normalize_rows(y)
    }

    pub fn encode(&self, units: &[u32]) -> Result<SentenceEmbedding> {
        Ok(self.encode_batch(&[units])?.pop().expect("one output per input"))
    }

    pub fn encode_batch(&self, seqs: &[&[u32]]) -> Result<Vec<SentenceEmbedding>> {
        let mut out = Vec::with_capacity(seqs.len());
        let mut drop = Dropout {
            p: 0.0,
            rng: seeding::rng(0),
        };
        for chunk in seqs.chunks(INFERENCE_CHUNK) {
            let mut tape = Tape::inference();
            let p = self.params.bind(&mut tape);
            let y = self.forward(&mut tape, &p, chunk, &mut drop)?;
            for row in tape.value(y).chunks(self.config.dim) {
                out.push(SentenceEmbedding::new(row.to_vec())?);
            }
        }
        Ok(out)
    }
}

/// Fits `model` so that its embedding of every training utterance, in every
/// language, approaches the anchor of that utterance's concepts.
pub fn train_encoder(
    model: &mut SentenceEncoder,
    corpus: &Corpus,
    anchor: &TeacherAnchor,
    config: &TrainConfig,
) -> Result<Trained> {
    if corpus.languages.len() < 2 {
        return Err(Error::Config(format!(
            "encoder training needs at least 2 languages, got {}",
            corpus.languages.len()
        )));
    }
    if anchor.dim() != model.dim() {
        return Err(Error::Config(format!(
            "anchor dimension {} differs from encoder dimension {}",
            anchor.dim(),
            model.dim()
        )));
    }
    let units: Vec<&[u32]> = corpus.train.iter().map(|r| r.units.as_slice()).collect();
    let targets: Vec<Vec<f32>> = corpus
        .train
        .iter()
        .map(|r| anchor.anchor(&r.concepts))
        .collect::<Result<_>>()?;
    let mut params = std::mem::take(&mut model.params);
    let result = fit(&mut params, units.len(), config, |tape, p, batch, drop| {
        let seqs: Vec<&[u32]> = batch.iter().map(|&i| units[i]).collect();
        let target: Vec<f32> = batch.iter().flat_map(|&i| targets[i].iter().copied()).collect();
        let y = model.forward(tape, p, &seqs, drop)?;
        let loss = tape.mse(y, &target)?;
        Ok(BatchLoss {
            total: loss,
            parts: vec![("mse", loss)],
        })
    });
    model.params = params;
    result
}

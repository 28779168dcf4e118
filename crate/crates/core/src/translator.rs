//! Unit-sequence generation from a sentence embedding.
//!
//! The embedding is cut into `n_sub` equal frames, refined by a two-layer
//! convolutional semantic encoder, and attended to by an autoregressive
//! transformer decoder. The decoder emits run-length-reduced units after a
//! `BOS, LANG` prefix and predicts each unit's log-duration from the hidden
//! state at that unit's input position. Training sees target-language
//! utterances only: each one is encoded and then reconstructed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{SentenceEmbedding, SentenceEncoder};
use crate::error::{Error, Result};
use crate::layers::{DecoderBlock, Dropout, KvCache, LayerNorm, Linear};
use crate::numerics::{sinusoidal_positions, Bound, ParamId, ParamStore, Segments, Tape, Tensor, Var};
use crate::seeding;
use crate::synthlang::{ConceptSentence, LangId, TrainRecord, UnitLayout, UnitSequence};
use crate::training::{fit, BatchLoss, TrainConfig, Trained};

/// Sentences decoded together per inference batch.
const DECODE_CHUNK: usize = 64;
/// Decode limit for a model that has not seen training data.
const UNTRAINED_MAX_DECODE: usize = 128;
/// Upper clamp on a predicted duration.
pub const MAX_DURATION: u32 = 64;

/// `n_sub` contiguous, equal slices of an embedding, row-major `[n_sub × D/n_sub]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubEmbeddingGrid {
    n_sub: usize,
    frames: Vec<f32>,
}

impl SubEmbeddingGrid {
    pub fn n_sub(&self) -> usize {
        self.n_sub
    }

    pub fn frame_dim(&self) -> usize {
        self.frames.len() / self.n_sub
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let f = self.frame_dim();
        &self.frames[i * f..(i + 1) * f]
    }

    pub fn flatten(&self) -> &[f32] {
        &self.frames
    }
}

pub fn expand_features(e: &SentenceEmbedding, n_sub: usize) -> Result<SubEmbeddingGrid> {
    let d = e.dim();
    if n_sub == 0 || d % n_sub != 0 {
        return Err(Error::Config(format!(
            "n_sub = {n_sub} does not divide the embedding dimension D = {d}"
        )));
    }
    Ok(SubEmbeddingGrid {
        n_sub,
        frames: e.values.clone(),
    })
}

/// Run-length form of a unit sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReducedUnitSequence {
    pub units: Vec<u32>,
    pub durations: Vec<u32>,
}

impl ReducedUnitSequence {
    pub fn new(units: Vec<u32>, durations: Vec<u32>) -> Result<Self> {
        let r = Self { units, durations };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.units.len() != self.durations.len() {
            return Err(Error::Invariant(format!(
                "{} reduced units but {} durations",
                self.units.len(),
                self.durations.len()
            )));
        }
        if let Some(i) = self.durations.iter().position(|&d| d == 0) {
            return Err(Error::Invariant(format!("zero duration at position {i}")));
        }
        if let Some(i) = self.units.windows(2).position(|w| w[0] == w[1]) {
            return Err(Error::Invariant(format!(
                "repeated unit at positions {i} and {}",
                i + 1
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

pub fn reduce_units(u: &[u32]) -> ReducedUnitSequence {
    let mut r = ReducedUnitSequence::default();
    for &x in u {
        match r.units.last() {
            Some(&last) if last == x => *r.durations.last_mut().expect("parallel vectors") += 1,
            _ => {
                r.units.push(x);
                r.durations.push(1);
            }
        }
    }
    r
}

pub fn expand_units(r: &ReducedUnitSequence) -> Result<UnitSequence> {
    r.validate()?;
    let mut out = Vec::with_capacity(r.durations.iter().map(|&d| d as usize).sum());
    for (&u, &d) in r.units.iter().zip(&r.durations) {
        out.extend(std::iter::repeat_n(u, d as usize));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorConfig {
    /// Embedding size `D` of the paired encoder.
    pub dim: usize,
    pub n_sub: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub kernel: usize,
    /// When false the conv stack is replaced by one linear projection.
    pub semantic_encoder: bool,
    pub alpha: f32,
    pub lambda_dur: f32,
    /// Languages whose utterances the model trains on.
    pub targets: Vec<LangId>,
}

impl TranslatorConfig {
    pub fn new(dim: usize, targets: Vec<LangId>) -> Self {
        Self {
            dim,
            n_sub: 16,
            d_model: 128,
            layers: 4,
            heads: 4,
            ffn: 512,
            kernel: 3,
            semantic_encoder: true,
            alpha: 0.2,
            lambda_dur: 0.1,
            targets,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sub == 0 || self.dim % self.n_sub != 0 {
            return Err(Error::Config(format!(
                "translator.n_sub = {} does not divide the embedding dimension D = {}",
                self.n_sub, self.dim
            )));
        }
        for (name, v) in [("d_model", self.d_model), ("heads", self.heads), ("ffn", self.ffn)] {
            if v == 0 {
                return Err(Error::Config(format!("translator.{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "translator.heads ({}) must divide translator.d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "translator.kernel must be odd, got {}",
                self.kernel
            )));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "translator.alpha must lie in [0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.lambda_dur >= 0.0 && self.lambda_dur.is_finite()) {
            return Err(Error::Config(format!(
                "translator.lambda_dur must be non-negative, got {}",
                self.lambda_dur
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::Config(
                "translator.targets must name at least one language".into(),
            ));
        }
        Ok(())
    }
}

/// Token IDs: every unit of the layout, then PAD, BOS, EOS and one language
/// token per layout language.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    layout: UnitLayout,
}

impl Vocab {
    pub fn new(layout: UnitLayout) -> Self {
        Self { layout }
    }

    pub fn layout(&self) -> &UnitLayout {
        &self.layout
    }

    pub fn units(&self) -> usize {
        self.layout.vocab_size()
    }

    pub fn pad(&self) -> usize {
        self.units()
    }

    pub fn bos(&self) -> usize {
        self.units() + 1
    }

    pub fn eos(&self) -> usize {
        self.units() + 2
    }

    pub fn lang_token(&self, lang: &LangId) -> Result<usize> {
        self.layout
            .index_of(lang)
            .map(|i| self.units() + 3 + i)
            .ok_or_else(|| Error::Config(format!("no language token for {lang}")))
    }

    pub fn size(&self) -> usize {
        self.units() + 3 + self.layout.len()
    }
}

#[derive(Debug, Clone)]
enum SemanticStack {
    Conv {
        k1: ParamId,
        b1: ParamId,
        k2: ParamId,
        b2: ParamId,
    },
    Bypass(Linear),
}

#[derive(Debug, Clone)]
pub struct TranslatorModel {
    config: TranslatorConfig,
    vocab: Vocab,
    params: ParamStore,
    semantic: SemanticStack,
    frame_pos: ParamId,
    tok_embed: ParamId,
    blocks: Vec<DecoderBlock>,
    ln_out: LayerNorm,
    head: Linear,
    dur_head: Linear,
    max_train_reduced: usize,
}

/// One decoded output.
#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub units: UnitSequence,
    pub reduced: ReducedUnitSequence,
    /// Decoding stopped at the length limit rather than at EOS.
    pub truncated: bool,
}

struct Example<'a> {
    lang_token: usize,
    reduced: ReducedUnitSequence,
    grid: &'a SubEmbeddingGrid,
}

impl TranslatorModel {
    pub fn new(config: TranslatorConfig, layout: UnitLayout, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Some(t) = config.targets.iter().find(|t| layout.index_of(t).is_none()) {
            return Err(Error::Config(format!("target language {t} is not in the unit layout")));
        }
        let vocab = Vocab::new(layout);
        let mut rng = seeding::rng(seed);
        let mut params = ParamStore::new();
        let (f, d, k) = (config.dim / config.n_sub, config.d_model, config.kernel);
        let semantic = if config.semantic_encoder {
            SemanticStack::Conv {
                k1: params.add_scaled("sem.conv1", &[k, f, d], 1.0 / ((k * f) as f32).sqrt(), &mut rng),
                b1: params.add_const("sem.conv1.b", &[d], 0.0),
                k2: params.add_scaled("sem.conv2", &[k, d, d], 1.0 / ((k * d) as f32).sqrt(), &mut rng),
                b2: params.add_const("sem.conv2.b", &[d], 0.0),
            }
        } else {
            SemanticStack::Bypass(Linear::new(&mut params, "sem.proj", f, d, &mut rng))
        };
        let frame_pos = params.add_scaled("sem.frame_pos", &[config.n_sub, d], 0.1, &mut rng);
        let tok_embed = params.add_scaled("tok_embed", &[vocab.size(), d], 1.0, &mut rng);
        let blocks = (0..config.layers)
            .map(|i| DecoderBlock::new(&mut params, &format!("dec{i}"), d, config.heads, config.ffn, &mut rng))
            .collect();
        let ln_out = LayerNorm::new(&mut params, "ln_out", d);
        let head = Linear::new(&mut params, "head", d, vocab.size(), &mut rng);
        let dur_head = Linear::new(&mut params, "dur_head", d, 1, &mut rng);
        Ok(Self {
            config,
            vocab,
            params,
            semantic,
            frame_pos,
            tok_embed,
            blocks,
            ln_out,
            head,
            dur_head,
            max_train_reduced: 0,
        })
    }

    pub fn config(&self) -> &TranslatorConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Longest reduced training sequence seen; 0 before training.
    pub fn max_train_reduced(&self) -> usize {
        self.max_train_reduced
    }

    pub fn set_max_train_reduced(&mut self, n: usize) {
        self.max_train_reduced = n;
    }

    pub fn max_decode_len(&self) -> usize {
        match self.max_train_reduced {
            0 => UNTRAINED_MAX_DECODE,
            n => 4 * n,
        }
    }

    fn check_grid(&self, grid: &SubEmbeddingGrid) -> Result<()> {
        if grid.n_sub() != self.config.n_sub || grid.flatten().len() != self.config.dim {
            return Err(Error::shape(
                "semantic_encode",
                &[grid.n_sub(), grid.frame_dim()],
                &[self.config.n_sub, self.config.dim / self.config.n_sub],
            ));
        }
        Ok(())
    }

    /// Semantic-encoder frames `[B·n_sub × d_model]` for a batch of grids.
    fn memory(&self, tape: &mut Tape, p: &Bound, grids: &[&SubEmbeddingGrid]) -> Result<(Var, Segments)> {
        let (n, f) = (self.config.n_sub, self.config.dim / self.config.n_sub);
        for g in grids {
            self.check_grid(g)?;
        }
        let data: Vec<f32> = grids.iter().flat_map(|g| g.flatten().iter().copied()).collect();
        let x = tape.constant(Tensor::new(&[grids.len() * n, f], data)?);
        let segs = Segments::uniform(grids.len(), n)?;
        let h = match &self.semantic {
            SemanticStack::Conv { k1, b1, k2, b2 } => {
                let h = tape.conv1d_segments(x, p[*k1], &segs)?;
                let h = tape.add_row(h, p[*b1])?;
                let h = tape.relu(h);
                let h = tape.conv1d_segments(h, p[*k2], &segs)?;
                tape.add_row(h, p[*b2])?
            }
            SemanticStack::Bypass(lin) => lin.forward(tape, p, x)?,
        };
        let idx: Vec<usize> = (0..grids.len()).flat_map(|_| 0..n).collect();
        let pos = tape.gather_rows(p[self.frame_pos], &idx)?;
        Ok((tape.add(h, pos)?, segs))
    }

    /// Refined frames `[n_sub × d_model]` of one grid.
    pub fn semantic_encode(&self, grid: &SubEmbeddingGrid) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        let (m, _) = self.memory(&mut tape, &p, &[grid])?;
        Ok(tape.tensor(m))
    }

    /// Final-layer decoder states `[N×d_model]` for packed token prefixes.
    fn decode_states(
        &self,
        tape: &mut Tape,
        p: &Bound,
        memory: Var,
        mem_segs: &Segments,
        inputs: &[&[usize]],
        drop: &mut Dropout,
    ) -> Result<(Var, Segments)> {
        let d = self.config.d_model;
        let lengths: Vec<usize> = inputs.iter().map(|s| s.len()).collect();
        let segs = Segments::from_lengths(&lengths)?;
        let ids: Vec<usize> = inputs.iter().flat_map(|s| s.iter().copied()).collect();
        let x = tape.embedding(p[self.tok_embed], &ids)?;
        let longest = lengths.iter().copied().max().unwrap_or(1);
        let table = sinusoidal_positions(longest, d);
        let mut pos = Vec::with_capacity(ids.len() * d);
        for &n in &lengths {
            pos.extend_from_slice(&table.data()[..n * d]);
        }
        let pos = tape.constant(Tensor::new(&[ids.len(), d], pos)?);
        let mut x = tape.add(x, pos)?;
        x = drop.apply(tape, x)?;
        for block in &self.blocks {
            x = block.forward(tape, p, x, memory, &segs, mem_segs, drop)?;
        }
        Ok((self.ln_out.forward(tape, p, x)?, segs))
    }

    fn decoder_input(&self, ex: &Example<'_>) -> Vec<usize> {
        let mut t = Vec::with_capacity(ex.reduced.len() + 2);
        t.push(self.vocab.bos());
        t.push(ex.lang_token);
        t.extend(ex.reduced.units.iter().map(|&u| u as usize));
        t
    }

    /// Teacher-forced losses of a batch: smoothed CE over next-token targets
    /// and MSE of predicted log-durations.
    fn batch_losses(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[&Example<'_>],
        drop: &mut Dropout,
    ) -> Result<(Var, Var)> {
        let grids: Vec<&SubEmbeddingGrid> = batch.iter().map(|e| e.grid).collect();
        let (memory, mem_segs) = self.memory(tape, p, &grids)?;
        let inputs: Vec<Vec<usize>> = batch.iter().map(|e| self.decoder_input(e)).collect();
        let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let (h, segs) = self.decode_states(tape, p, memory, &mem_segs, &refs, drop)?;
        let (mut ce_rows, mut ce_targets, mut dur_rows, mut dur_targets) = (vec![], vec![], vec![], vec![]);
        for (s, ex) in batch.iter().enumerate() {
            let start = segs.range(s).start;
            let n = ex.reduced.len();
            for j in 0..=n {
                ce_rows.push(start + 1 + j);
                ce_targets.push(if j < n {
                    ex.reduced.units[j] as usize
                } else {
                    self.vocab.eos()
                });
            }
            for (j, &d) in ex.reduced.durations.iter().enumerate() {
                dur_rows.push(start + 2 + j);
                dur_targets.push((d as f32).ln());
            }
        }
        let hc = tape.gather_rows(h, &ce_rows)?;
        let logits = self.head.forward(tape, p, hc)?;
        let ce = tape.label_smoothed_ce(logits, &ce_targets, self.config.alpha)?;
        let dur = if dur_rows.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            let hd = tape.gather_rows(h, &dur_rows)?;
            let pred = self.dur_head.forward(tape, p, hd)?;
            tape.mse(pred, &dur_targets)?
        };
        Ok((ce, dur))
    }

    fn examples<'a>(&self, records: &[TrainRecord], grids: &'a [SubEmbeddingGrid]) -> Result<Vec<Example<'a>>> {
        records
            .iter()
            .zip(grids)
            .map(|(r, grid)| {
                Ok(Example {
                    lang_token: self.vocab.lang_token(&r.lang)?,
                    reduced: reduce_units(&r.units),
                    grid,
                })
            })
            .collect()
    }

    fn grids(&self, encoder: &SentenceEncoder, seqs: &[&[u32]]) -> Result<Vec<SubEmbeddingGrid>> {
        if encoder.dim() != self.config.dim {
            return Err(Error::Config(format!(
                "encoder dimension {} differs from translator dimension {}",
                encoder.dim(),
                self.config.dim
            )));
        }
        encoder
            .encode_batch(seqs)?
            .iter()
            .map(|e| expand_features(e, self.config.n_sub))
            .collect()
    }

    /// Rejects training data that is not monolingual target-language material.
    pub fn check_monolingual(&self, records: &[TrainRecord]) -> Result<()> {
        if records.is_empty() {
            return Err(Error::EmptyInput("translator training set".into()));
        }
        let mut owner: BTreeMap<&ConceptSentence, &LangId> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if !self.config.targets.contains(&r.lang) {
                return Err(Error::ContractViolation(format!(
                    "record {i} is in {}, which is not a target language of this model",
                    r.lang
                )));
            }
            let range = self.vocab.layout().range(&r.lang).expect("targets are in the layout");
            if r.units.is_empty() || r.units.iter().any(|u| !range.contains(u)) {
                return Err(Error::ContractViolation(format!(
                    "record {i} is not a well-formed {} utterance",
                    r.lang
                )));
            }
            if let Some(other) = owner.insert(&r.concepts, &r.lang) {
                if other != &r.lang {
                    return Err(Error::ContractViolation(format!(
                        "record {i} pairs a {} utterance with a {other} one",
                        r.lang
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fraction of next-token predictions (units and EOS) that match the
    /// reference under teacher forcing.
    pub fn teacher_forced_accuracy(&self, encoder: &SentenceEncoder, records: &[TrainRecord]) -> Result<f64> {
        let seqs: Vec<&[u32]> = records.iter().map(|r| r.units.as_slice()).collect();
        let grids = self.grids(encoder, &seqs)?;
        let examples = self.examples(records, &grids)?;
        let (mut hits, mut total) = (0usize, 0usize);
        let mut drop = no_dropout();
        for chunk in examples.chunks(DECODE_CHUNK) {
            let mut tape = Tape::inference();
            let p = self.params.bind(&mut tape);
            let g: Vec<&SubEmbeddingGrid> = chunk.iter().map(|e| e.grid).collect();
            let (memory, mem_segs) = self.memory(&mut tape, &p, &g)?;
            let inputs: Vec<Vec<usize>> = chunk.iter().map(|e| self.decoder_input(e)).collect();
            let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
            let (h, segs) = self.decode_states(&mut tape, &p, memory, &mem_segs, &refs, &mut drop)?;
            let logits = self.head.forward(&mut tape, &p, h)?;
            let v = self.vocab.size();
            let values = tape.value(logits);
            for (s, ex) in chunk.iter().enumerate() {
                let start = segs.range(s).start;
                let n = ex.reduced.len();
                for j in 0..=n {
                    let row = &values[(start + 1 + j) * v..(start + 2 + j) * v];
                    let want = if j < n {
                        ex.reduced.units[j] as usize
                    } else {
                        self.vocab.eos()
                    };
                    hits += usize::from(self.pick(row) == want);
                    total += 1;
                }
            }
        }
        Ok(hits as f64 / total as f64)
    }

    /// Greedy choice among units and EOS.
    fn pick(&self, logits: &[f32]) -> usize {
        let eos = self.vocab.eos();
        let mut best = eos;
        let mut best_val = logits[eos];
        for (i, &x) in logits[..self.vocab.units()].iter().enumerate() {
            if x > best_val {
                best = i;
                best_val = x;
            }
        }
        best
    }

    /// Greedy decoding from precomputed sentence embeddings.
    pub fn generate(&self, embeddings: &[SentenceEmbedding], target: &LangId) -> Result<Vec<Translation>> {
        let lang_token = self.vocab.lang_token(target)?;
        let grids: Vec<SubEmbeddingGrid> = embeddings
            .iter()
            .map(|e| expand_features(e, self.config.n_sub))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(grids.len());
        for chunk in grids.chunks(DECODE_CHUNK) {
            out.extend(self.generate_chunk(chunk, lang_token)?);
        }
        Ok(out)
    }

    fn generate_chunk(&self, grids: &[SubEmbeddingGrid], lang_token: usize) -> Result<Vec<Translation>> {
        self.decode_greedy(grids, lang_token)?
            .into_iter()
            .map(|(tokens, durations, truncated)| {
                let units: Vec<u32> = tokens.iter().map(|&t| t as u32).collect();
                let (units, durations) = merge_repeats(units, durations);
                let reduced = ReducedUnitSequence::new(units, durations)?;
                Ok(Translation {
                    units: expand_units(&reduced)?,
                    reduced,
                    truncated,
                })
            })
            .collect()
    }

    /// Emitted unit tokens, their durations and the truncation flag of each
    /// sequence, decoded greedily with cached self-attention keys and values.
    #[allow(clippy::type_complexity)]
    fn decode_greedy(
        &self,
        grids: &[SubEmbeddingGrid],
        lang_token: usize,
    ) -> Result<Vec<(Vec<usize>, Vec<u32>, bool)>> {
        let d = self.config.d_model;
        let n = self.config.n_sub;
        let max_len = self.max_decode_len();
        let positions = sinusoidal_positions(max_len + 2, d);
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        let refs: Vec<&SubEmbeddingGrid> = grids.iter().collect();
        let (memory, _) = self.memory(&mut tape, &p, &refs)?;
        let cross: Vec<(Var, Var)> = self
            .blocks
            .iter()
            .map(|b| b.cross_kv(&mut tape, &p, memory))
            .collect::<Result<_>>()?;
        let base = tape.len();

        let mut prefixes: Vec<Vec<usize>> = vec![vec![self.vocab.bos(), lang_token]; grids.len()];
        let mut durations: Vec<Vec<u32>> = vec![Vec::new(); grids.len()];
        let mut done: Vec<Option<bool>> = vec![None; grids.len()];
        let mut caches: Vec<Vec<KvCache>> = vec![vec![KvCache::default(); grids.len()]; self.blocks.len()];
        // Each pass feeds prefix position `fed` of every active sequence;
        // predictions start once the language token has been fed.
        let mut fed = 0usize;
        loop {
            let active: Vec<usize> = (0..grids.len()).filter(|&i| done[i].is_none()).collect();
            if active.is_empty() {
                break;
            }
            tape.truncate(base);
            let mem_rows: Vec<usize> = active.iter().flat_map(|&i| i * n..(i + 1) * n).collect();
            let mem_segs = Segments::uniform(active.len(), n)?;
            let tokens: Vec<usize> = active.iter().map(|&i| prefixes[i][fed]).collect();
            let x = tape.embedding(p[self.tok_embed], &tokens)?;
            let pos: Vec<f32> = active
                .iter()
                .flat_map(|_| positions.data()[fed * d..(fed + 1) * d].iter().copied())
                .collect();
            let pos = tape.constant(Tensor::new(&[active.len(), d], pos)?);
            let mut x = tape.add(x, pos)?;
            for (l, block) in self.blocks.iter().enumerate() {
                let ck = tape.gather_rows(cross[l].0, &mem_rows)?;
                let cv = tape.gather_rows(cross[l].1, &mem_rows)?;
                let mut layer_caches: Vec<&mut KvCache> = caches[l]
                    .iter_mut()
                    .zip(&done)
                    .filter(|(_, d)| d.is_none())
                    .map(|(c, _)| c)
                    .collect();
                x = block.step(&mut tape, &p, x, &mut layer_caches, ck, cv, &mem_segs)?;
            }
            fed += 1;
            if fed < 2 {
                continue;
            }
            let h = self.ln_out.forward(&mut tape, &p, x)?;
            let logits = self.head.forward(&mut tape, &p, h)?;
            let dur = self.dur_head.forward(&mut tape, &p, h)?;
            let v = self.vocab.size();
            for (s, &i) in active.iter().enumerate() {
                if fed > 2 {
                    durations[i].push(to_duration(tape.value(dur)[s]));
                }
                if fed - 2 == max_len {
                    done[i] = Some(true);
                    continue;
                }
                let next = self.pick(&tape.value(logits)[s * v..(s + 1) * v]);
                if next == self.vocab.eos() {
                    done[i] = Some(false);
                } else {
                    prefixes[i].push(next);
                }
            }
        }
        Ok(prefixes
            .into_iter()
            .zip(durations)
            .zip(done)
            .map(|((prefix, durations), truncated)| {
                (
                    prefix[2..].to_vec(),
                    durations,
                    truncated.expect("every sequence finishes"),
                )
            })
            .collect())
    }
}

fn no_dropout() -> Dropout {
    Dropout {
        p: 0.0,
        rng: seeding::rng(0),
    }
}

/// `exp` of a predicted log-duration, rounded and clamped to `[1, MAX_DURATION]`.
pub fn to_duration(log_d: f32) -> u32 {
    let d = f64::from(log_d).exp().round();
    if d.is_nan() {
        return 1;
    }
    d.clamp(1.0, f64::from(MAX_DURATION)) as u32
}

/// Folds adjacent equal units the decoder emitted into one run.
fn merge_repeats(units: Vec<u32>, durations: Vec<u32>) -> (Vec<u32>, Vec<u32>) {
    let mut u = Vec::with_capacity(units.len());
    let mut d: Vec<u32> = Vec::with_capacity(units.len());
    for (x, k) in units.into_iter().zip(durations) {
        if u.last() == Some(&x) {
            *d.last_mut().expect("parallel vectors") += k;
        } else {
            u.push(x);
            d.push(k);
        }
    }
    (u, d)
}

/// Trains on monolingual target-language records: every utterance is
/// encoded by the frozen `encoder` and reconstructed behind its own
/// language token.
pub fn train_translator(
    model: &mut TranslatorModel,
    encoder: &SentenceEncoder,
    records: &[TrainRecord],
    config: &TrainConfig,
) -> Result<Trained> {
    model.check_monolingual(records)?;
    let seqs: Vec<&[u32]> = records.iter().map(|r| r.units.as_slice()).collect();
    let grids = model.grids(encoder, &seqs)?;
    let examples = model.examples(records, &grids)?;
    let lambda = model.config.lambda_dur;
    let mut params = std::mem::take(&mut model.params);
    let result = fit(&mut params, examples.len(), config, |tape, p, batch, drop| {
        let batch: Vec<&Example<'_>> = batch.iter().map(|&i| &examples[i]).collect();
        let (ce, dur) = model.batch_losses(tape, p, &batch, drop)?;
        let weighted = tape.scale(dur, lambda);
        let total = tape.add(ce, weighted)?;
        Ok(BatchLoss {
            total,
            parts: vec![("total", total), ("unit_ce", ce), ("duration_mse", dur)],
        })
    });
    model.params = params;
    let longest = examples.iter().map(|e| e.reduced.len()).max().unwrap_or(0);
    model.max_train_reduced = model.max_train_reduced.max(longest);
    result
}

/// Encodes each source with the frozen encoder and decodes it in `target`.
pub fn translate_batch(
    model: &TranslatorModel,
    encoder: &SentenceEncoder,
    sources: &[&[u32]],
    target: &LangId,
) -> Result<Vec<Translation>> {
    model.vocab.lang_token(target)?;
    let embeddings = encoder.encode_batch(sources)?;
    model.generate(&embeddings, target)
}

pub fn translate(
    model: &TranslatorModel,
    encoder: &SentenceEncoder,
    source: &[u32],
    target: &LangId,
) -> Result<Translation> {
    Ok(translate_batch(model, encoder, &[source], target)?
        .pop()
        .expect("one output per input"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduce_examples() {
        let r = reduce_units(&[5, 5, 5, 2, 2]);
        assert_eq!((r.units.as_slice(), r.durations.as_slice()), (&[5, 2][..], &[3, 2][..]));
        let r = reduce_units(&[1, 2, 3]);
        assert_eq!(r.durations, vec![1, 1, 1]);
        assert!(reduce_units(&[]).is_empty());
    }

    #[test]
    fn expand_examples() {
        let r = ReducedUnitSequence {
            units: vec![5, 2],
            durations: vec![3, 2],
        };
        assert_eq!(expand_units(&r).unwrap(), vec![5, 5, 5, 2, 2]);
        let one = ReducedUnitSequence {
            units: vec![7],
            durations: vec![1],
        };
        assert_eq!(expand_units(&one).unwrap(), vec![7]);
        let zero = ReducedUnitSequence {
            units: vec![7],
            durations: vec![0],
        };
        assert!(matches!(expand_units(&zero), Err(Error::Invariant(_))));
    }

    #[test]
    fn expand_features_partitions() {
        let e = SentenceEmbedding::new((0..16).map(|i| i as f32).collect()).unwrap();
        let g = expand_features(&e, 4).unwrap();
        assert_eq!(g.n_sub(), 4);
        assert_eq!(g.frame(2), &[8.0, 9.0, 10.0, 11.0]);
        assert_eq!(g.flatten(), e.values.as_slice());
        let single = expand_features(&e, 1).unwrap();
        assert_eq!(single.frame(0), e.values.as_slice());
        let err = expand_features(&e, 5).unwrap_err().to_string();
        assert!(err.contains("16") && err.contains('5'), "{err}");
    }

    #[test]
    fn durations_round_and_clamp() {
        assert_eq!(to_duration(-3.0), 1);
        assert_eq!(to_duration(2f32.ln()), 2);
        assert_eq!(to_duration(f32::INFINITY), MAX_DURATION);
        assert_eq!(to_duration(f32::NAN), 1);
    }

    #[test]
    fn merge_folds_repeats() {
        assert_eq!(merge_repeats(vec![3, 3, 4], vec![1, 2, 1]), (vec![3, 4], vec![3, 1]));
    }

    fn tiny_model(max_reduced: usize) -> TranslatorModel {
        let layout: UnitLayout = "a:0:12,b:12:12".parse().unwrap();
        let mut cfg = TranslatorConfig::new(8, vec![LangId::new("a").unwrap()]);
        (cfg.n_sub, cfg.d_model, cfg.layers, cfg.heads, cfg.ffn) = (4, 16, 2, 2, 32);
        let mut m = TranslatorModel::new(cfg, layout, 3).unwrap();
        m.set_max_train_reduced(max_reduced);
        m
    }

    fn embedding(seed: u64) -> SentenceEmbedding {
        use rand::RngExt;
        let mut rng = seeding::rng(seed);
        SentenceEmbedding::new((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn cached_decoding_matches_full_recompute() {
        let model = tiny_model(3);
        let lang = LangId::new("a").unwrap();
        let embs: Vec<SentenceEmbedding> = (0..5).map(embedding).collect();
        let token = model.vocab.lang_token(&lang).unwrap();
        let grids: Vec<SubEmbeddingGrid> = embs.iter().map(|e| expand_features(e, 4).unwrap()).collect();
        let outs = model.decode_greedy(&grids, token).unwrap();
        for (grid, (tokens, durations, truncated)) in grids.iter().zip(&outs) {
            let mut prefix = vec![model.vocab.bos(), token];
            prefix.extend(tokens);
            let mut tape = Tape::inference();
            let p = model.params.bind(&mut tape);
            let (mem, ms) = model.memory(&mut tape, &p, &[grid]).unwrap();
            let (h, _) = model
                .decode_states(&mut tape, &p, mem, &ms, &[&prefix], &mut no_dropout())
                .unwrap();
            let logits = model.head.forward(&mut tape, &p, h).unwrap();
            let dur = model.dur_head.forward(&mut tape, &p, h).unwrap();
            let v = model.vocab.size();
            for j in 1..prefix.len() - 1 {
                let row = &tape.value(logits)[j * v..(j + 1) * v];
                assert_eq!(model.pick(row), prefix[j + 1], "position {j}");
            }
            let last = prefix.len() - 1;
            let next = model.pick(&tape.value(logits)[last * v..(last + 1) * v]);
            if *truncated {
                assert_eq!(tokens.len(), model.max_decode_len());
            } else {
                assert_eq!(next, model.vocab.eos());
            }
            for (j, &d) in durations.iter().enumerate() {
                assert_eq!(to_duration(tape.value(dur)[j + 2]), d);
            }
        }
    }

    #[test]
    fn untrained_output_is_truncated_at_limit() {
        let model = tiny_model(2);
        let outs = model.generate(&[embedding(1)], &LangId::new("b").unwrap()).unwrap();
        assert!(outs[0].reduced.len() <= 8);
    }

    #[test]
    fn contract_rejects_foreign_and_parallel_records() {
        let model = tiny_model(0);
        let (a, b) = (LangId::new("a").unwrap(), LangId::new("b").unwrap());
        let rec = |lang: &LangId, units: Vec<u32>, c: Vec<u32>| TrainRecord {
            lang: lang.clone(),
            units,
            concepts: ConceptSentence(c),
        };
        assert!(model.check_monolingual(&[rec(&a, vec![1, 2], vec![0])]).is_ok());
        assert!(matches!(
            model.check_monolingual(&[rec(&b, vec![13], vec![0])]),
            Err(Error::ContractViolation(_))
        ));
        assert!(matches!(
            model.check_monolingual(&[rec(&a, vec![1, 13], vec![0])]),
            Err(Error::ContractViolation(_))
        ));
    }
}

//! In-memory pipeline steps shared by the subcommands and the test suites.
//! Nothing here touches the filesystem.

use rand::seq::index;
use serde::Serialize;

use unitrans_core::encoder::{cosine, train_encoder, SentenceEncoder, TeacherAnchor};
use unitrans_core::evalkit::{
    corpus_bleu, project_2d, purity_summary, BleuReport, Metrics, Projection, SimilarityReport,
};
use unitrans_core::seeding;
use unitrans_core::synthlang::{Corpus, EvalPair, TrainRecord, UnitLayout};
use unitrans_core::training::{TrainReport, Trained};
use unitrans_core::translator::{train_translator, translate_batch, TranslatorConfig, TranslatorModel};
use unitrans_core::{LangId, SentenceEmbedding};

use crate::config::ExperimentConfig;
use crate::failure::{CliResult, Failure};

/// Distractors each parallel partner competes against during retrieval.
pub const DISTRACTORS: usize = 9;
/// Held-in records scored for teacher-forced accuracy after training.
const HELD_IN: usize = 500;

pub fn fit_encoder(cfg: &ExperimentConfig, corpus: &Corpus) -> CliResult<(SentenceEncoder, Trained)> {
    let mut model = SentenceEncoder::new(cfg.encoder_config(corpus.layout().vocab_size()), cfg.encoder_seed())?;
    let anchor = TeacherAnchor::new(corpus.config.grammar.num_concepts, model.dim(), cfg.anchor_seed())?;
    let trained = train_encoder(&mut model, corpus, &anchor, &cfg.encoder_train_config())?;
    Ok((model, trained))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncoderMetrics {
    pub pairs: usize,
    pub distractors: usize,
    /// Fraction of pairs whose partner beats every distractor.
    pub retrieval_accuracy: f64,
    pub parallel_mean: f64,
    /// Mean cosine of each source with the next pair's target.
    pub mismatched_mean: f64,
    pub margin: f64,
}

/// Cross-lingual retrieval over one held-out pair per eval sentence.
pub fn encoder_metrics(encoder: &SentenceEncoder, corpus: &Corpus, seed: u64) -> CliResult<EncoderMetrics> {
    let pairs: Vec<&EvalPair> = corpus.eval_mixed();
    let n = pairs.len();
    if n <= DISTRACTORS {
        return Err(Failure::config(format!(
            "retrieval needs more than {DISTRACTORS} eval pairs, corpus has {n}"
        )));
    }
    let src: Vec<&[u32]> = pairs.iter().map(|p| p.src.as_slice()).collect();
    let tgt: Vec<&[u32]> = pairs.iter().map(|p| p.tgt.as_slice()).collect();
    let es = encoder.encode_batch(&src)?;
    let et = encoder.encode_batch(&tgt)?;
    let mut rng = seeding::rng(seed);
    let (mut hits, mut parallel, mut mismatched) = (0usize, 0.0, 0.0);
    for i in 0..n {
        let own = cosine(&es[i], &et[i])?;
        parallel += own;
        mismatched += cosine(&es[i], &et[(i + 1) % n])?;
        let mut beaten = true;
        for j in index::sample(&mut rng, n - 1, DISTRACTORS) {
            let j = if j >= i { j + 1 } else { j };
            if cosine(&es[i], &et[j])? >= own {
                beaten = false;
            }
        }
        hits += usize::from(beaten);
    }
    let (parallel_mean, mismatched_mean) = (parallel / n as f64, mismatched / n as f64);
    Ok(EncoderMetrics {
        pairs: n,
        distractors: DISTRACTORS,
        retrieval_accuracy: hits as f64 / n as f64,
        parallel_mean,
        mismatched_mean,
        margin: parallel_mean - mismatched_mean,
    })
}

/// Training records of the configured target languages only.
pub fn target_records(corpus: &Corpus, targets: &[LangId]) -> Vec<TrainRecord> {
    corpus
        .train
        .iter()
        .filter(|r| targets.contains(&r.lang))
        .cloned()
        .collect()
}

pub fn fit_translator(
    cfg: &ExperimentConfig,
    tcfg: TranslatorConfig,
    model_seed: u64,
    corpus: &Corpus,
    encoder: &SentenceEncoder,
) -> CliResult<(TranslatorModel, Trained)> {
    let records = target_records(corpus, &tcfg.targets);
    let mut model = TranslatorModel::new(tcfg, corpus.layout(), ExperimentConfig::translator_seed(model_seed))?;
    let trained = train_translator(&mut model, encoder, &records, &cfg.translator_train_config(model_seed))?;
    Ok((model, trained))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranslatorTraining {
    pub training: TrainReport,
    pub held_in: usize,
    pub teacher_forced_accuracy: f64,
}

pub fn translator_training_metrics(
    model: &TranslatorModel,
    encoder: &SentenceEncoder,
    corpus: &Corpus,
    report: TrainReport,
) -> CliResult<TranslatorTraining> {
    let records = target_records(corpus, &model.config().targets);
    let held: Vec<TrainRecord> = records.into_iter().take(HELD_IN).collect();
    Ok(TranslatorTraining {
        training: report,
        held_in: held.len(),
        teacher_forced_accuracy: model.teacher_forced_accuracy(encoder, &held)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionMetrics {
    pub source: LangId,
    pub target: LangId,
    pub pairs: usize,
    pub truncated: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PurityTotals {
    pub tokens: usize,
    pub out_of_range_tokens: usize,
    pub out_of_range: f64,
    pub wrong_language: usize,
    pub empty: usize,
}

/// The metrics file of `evaluate`: pooled scores, then one entry per
/// direction in order of first appearance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub bleu: BleuReport,
    pub similarity: SimilarityReport,
    pub purity: PurityTotals,
    pub directions: Vec<DirectionMetrics>,
}

/// Pairs the model can be scored on: target among its languages, source
/// different from target, optionally restricted to one source.
pub fn select_pairs<'a>(pairs: &'a [EvalPair], targets: &[LangId], source: Option<&LangId>) -> Vec<&'a EvalPair> {
    pairs
        .iter()
        .filter(|p| targets.contains(&p.tgt_lang) && p.src_lang != p.tgt_lang)
        .filter(|p| source.map_or(true, |s| &p.src_lang == s))
        .collect()
}

pub fn evaluate(
    model: &TranslatorModel,
    encoder: &SentenceEncoder,
    pairs: &[&EvalPair],
    layout: &UnitLayout,
    smooth: bool,
) -> CliResult<EvalMetrics> {
    if pairs.is_empty() {
        return Err(Failure::new(
            crate::failure::FailureKind::Data,
            "no evaluation pairs match the model's targets",
        ));
    }
    let mut directions: Vec<(LangId, LangId)> = Vec::new();
    for p in pairs {
        let d = (p.src_lang.clone(), p.tgt_lang.clone());
        if !directions.contains(&d) {
            directions.push(d);
        }
    }
    let (mut all_hyp, mut all_ref, mut all_cos) = (Vec::new(), Vec::new(), Vec::new());
    let (mut tokens, mut outside, mut wrong, mut empty) = (0usize, 0usize, 0usize, 0usize);
    let mut per_direction = Vec::new();
    for (src, tgt) in directions {
        let group: Vec<&EvalPair> = pairs
            .iter()
            .copied()
            .filter(|p| p.src_lang == src && p.tgt_lang == tgt)
            .collect();
        let sources: Vec<&[u32]> = group.iter().map(|p| p.src.as_slice()).collect();
        let refs: Vec<&[u32]> = group.iter().map(|p| p.tgt.as_slice()).collect();
        let out = translate_batch(model, encoder, &sources, &tgt)?;
        let hyps: Vec<&[u32]> = out.iter().map(|t| t.units.as_slice()).collect();
        let bleu = corpus_bleu(&hyps, &refs, 4, smooth)?;
        let similarity = similarity_or_zero(encoder, &hyps, &refs)?;
        let purity = purity_summary(&hyps, &tgt, layout)?;
        tokens += purity.tokens;
        let range = layout.range(&tgt).expect("purity_summary checked the target");
        outside += hyps
            .iter()
            .flat_map(|h| h.iter())
            .filter(|u| !range.contains(u))
            .count();
        wrong += purity.wrong_language;
        empty += purity.empty;
        all_cos.extend(similarity.per_pair.iter().copied());
        all_hyp.extend(out.iter().map(|t| t.units.clone()));
        all_ref.extend(refs.iter().map(|r| r.to_vec()));
        per_direction.push(DirectionMetrics {
            source: src,
            target: tgt,
            pairs: group.len(),
            truncated: out.iter().filter(|t| t.truncated).count(),
            metrics: Metrics {
                bleu,
                similarity,
                purity,
            },
        });
    }
    Ok(EvalMetrics {
        bleu: corpus_bleu(&all_hyp, &all_ref, 4, smooth)?,
        similarity: SimilarityReport::from_pairs(all_cos)?,
        purity: PurityTotals {
            tokens,
            out_of_range_tokens: outside,
            out_of_range: if tokens == 0 {
                0.0
            } else {
                outside as f64 / tokens as f64
            },
            wrong_language: wrong,
            empty,
        },
        directions: per_direction,
    })
}

/// Cosine per pair; an empty translation scores 0 against its reference.
fn similarity_or_zero(encoder: &SentenceEncoder, hyps: &[&[u32]], refs: &[&[u32]]) -> CliResult<SimilarityReport> {
    let keep: Vec<usize> = (0..hyps.len()).filter(|&i| !hyps[i].is_empty()).collect();
    let h: Vec<&[u32]> = keep.iter().map(|&i| hyps[i]).collect();
    let r: Vec<&[u32]> = keep.iter().map(|&i| refs[i]).collect();
    let scored = if h.is_empty() {
        Vec::new()
    } else {
        unitrans_core::evalkit::similarity_eval(encoder, &h, &r)?.per_pair
    };
    let mut per_pair = vec![0.0; hyps.len()];
    for (&i, c) in keep.iter().zip(scored) {
        per_pair[i] = c;
    }
    Ok(SimilarityReport::from_pairs(per_pair)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub n_sub: usize,
    pub semantic_encoder: bool,
    pub seed: u64,
    pub bleu: f64,
    pub similarity: f64,
    pub out_of_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub variant: String,
    pub n_sub: usize,
    pub semantic_encoder: bool,
    pub bleu_mean: f64,
    /// Sample standard deviation across seeds; 0 for a single seed.
    pub bleu_std: f64,
    pub bleu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub source: LangId,
    pub target: LangId,
    pub pairs: usize,
    pub summary: Vec<AblationSummary>,
    pub rows: Vec<AblationRow>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains and scores one translator per (variant, seed) on the first
/// configured target language.
pub fn ablate(cfg: &ExperimentConfig, corpus: &Corpus, encoder: &SentenceEncoder) -> CliResult<AblationTable> {
    let target = cfg.translator.targets[0].clone();
    let source = match &cfg.eval_source {
        Some(s) => s.clone(),
        None => corpus
            .languages
            .iter()
            .map(|l| l.id.clone())
            .find(|l| *l != target)
            .ok_or_else(|| Failure::config("ablation needs a source language other than the target"))?,
    };
    let pairs: Vec<&EvalPair> = corpus.eval_direction(&source, &target).collect();
    let mut variants: Vec<(String, usize, bool)> = cfg
        .ablate_n_sub
        .iter()
        .map(|&n| (format!("n_sub={n}"), n, true))
        .collect();
    if cfg.ablate_bypass {
        variants.push(("no_semantic_encoder".into(), cfg.translator.n_sub, false));
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (name, n_sub, semantic) in variants {
        let mut scores = Vec::new();
        for &seed in &cfg.ablate_seeds {
            let tcfg = TranslatorConfig {
                n_sub,
                semantic_encoder: semantic,
                targets: vec![target.clone()],
                ..cfg.translator_config()
            };
            let (model, _) = fit_translator(cfg, tcfg, seed, corpus, encoder)?;
            let m = evaluate(&model, encoder, &pairs, &corpus.layout(), cfg.eval_smooth)?;
            scores.push(m.bleu.score);
            rows.push(AblationRow {
                variant: name.clone(),
                n_sub,
                semantic_encoder: semantic,
                seed,
                bleu: m.bleu.score,
                similarity: m.similarity.mean,
                out_of_range: m.purity.out_of_range,
            });
        }
        let (bleu_mean, bleu_std) = mean_std(&scores);
        summary.push(AblationSummary {
            variant: name,
            n_sub,
            semantic_encoder: semantic,
            bleu_mean,
            bleu_std,
            bleu: scores,
        });
    }
    let n_pairs = pairs.len();
    drop(pairs);
    Ok(AblationTable {
        source,
        target,
        pairs: n_pairs,
        summary,
        rows,
    })
}

impl AblationTable {
    /// One line per variant: mean and spread, then each seed's score.
    pub fn to_csv(&self) -> String {
        let seeds = self.summary.first().map_or(0, |s| s.bleu.len());
        let mut s = String::from("variant,n_sub,semantic_encoder,bleu_mean,bleu_std");
        for i in 0..seeds {
            s.push_str(&format!(",bleu_seed{}", i + 1));
        }
        s.push('\n');
        for r in &self.summary {
            s.push_str(&format!(
                "{},{},{},{:.4},{:.4}",
                r.variant, r.n_sub, r.semantic_encoder, r.bleu_mean, r.bleu_std
            ));
            for b in &r.bleu {
                s.push_str(&format!(",{b:.4}"));
            }
            s.push('\n');
        }
        s
    }
}

/// One realisation per language of the first `sentences` eval sentences.
pub struct EmbeddingExport {
    pub rows: Vec<(usize, LangId, SentenceEmbedding)>,
    pub projection: Projection,
}

pub fn export_embeddings(
    encoder: &SentenceEncoder,
    corpus: &Corpus,
    sentences: usize,
    seed: u64,
) -> CliResult<EmbeddingExport> {
    let per_sentence = corpus.languages.len() * (corpus.languages.len() - 1);
    let mut picked: Vec<(usize, LangId, &[u32])> = Vec::new();
    for (i, p) in corpus.eval.iter().enumerate() {
        let sentence = i / per_sentence;
        if sentence >= sentences {
            break;
        }
        if !picked.iter().any(|(s, l, _)| *s == sentence && *l == p.src_lang) {
            picked.push((sentence, p.src_lang.clone(), &p.src));
        }
    }
    let units: Vec<&[u32]> = picked.iter().map(|p| p.2).collect();
    let embeddings = encoder.encode_batch(&units)?;
    let projection = project_2d(&embeddings, seed)?;
    let rows = picked
        .into_iter()
        .zip(embeddings)
        .map(|((s, l, _), e)| (s, l.clone(), e.with_lang(l)))
        .collect();
    Ok(EmbeddingExport { rows, projection })
}

impl EmbeddingExport {
    pub fn to_csv(&self) -> String {
        let dim = self.rows.first().map_or(0, |r| r.2.dim());
        let mut s = String::from("sentence,lang,pc1,pc2");
        for j in 0..dim {
            s.push_str(&format!(",e{j}"));
        }
        s.push('\n');
        for ((sentence, lang, e), p) in self.rows.iter().zip(&self.projection.points) {
            s.push_str(&format!("{sentence},{lang},{},{}", p[0], p[1]));
            for v in &e.values {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

//! Flat `key=value` experiment configuration.
//!
//! A file supplies any subset of keys; command-line flags are applied on
//! top. The effective configuration is rendered back with [`ExperimentConfig::to_text`]
//! and echoed next to every output.

use std::path::Path;
use std::str::FromStr;

use unitrans_core::encoder::EncoderConfig;
use unitrans_core::seeding::derive_seed;
use unitrans_core::synthlang::{
    parse_key_values, CorpusConfig, DurationProfile, LanguageSpec, ReorderRule, Transitions,
};
use unitrans_core::training::TrainConfig;
use unitrans_core::translator::TranslatorConfig;
use unitrans_core::LangId;

use crate::failure::{CliResult, Failure};

// Seed tags; every model seed derives from the experiment seed.
const TAG_ENCODER_INIT: u64 = 10;
const TAG_ENCODER_TRAIN: u64 = 11;
const TAG_ANCHOR: u64 = 12;
const TAG_TRANSLATOR_INIT: u64 = 20;
const TAG_TRANSLATOR_TRAIN: u64 = 21;
const TAG_EVAL: u64 = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Corpus seed, and the root of every model and evaluation seed.
    pub seed: u64,
    /// `corpus.seed` is overwritten by `seed` when the corpus is built.
    pub corpus: CorpusConfig,
    /// `vocab_size` is taken from the corpus layout at build time.
    pub encoder: EncoderConfig,
    pub encoder_train: TrainConfig,
    /// `dim` is taken from the encoder at build time.
    pub translator: TranslatorConfig,
    pub translator_train: TrainConfig,
    /// Restricts evaluation to pairs from this source language.
    pub eval_source: Option<LangId>,
    pub eval_smooth: bool,
    pub ablate_n_sub: Vec<usize>,
    pub ablate_seeds: Vec<u64>,
    /// Adds a row with the semantic encoder bypassed at the default `N_sub`.
    pub ablate_bypass: bool,
    /// Eval sentences exported per language by `export-embeddings`.
    pub export_sentences: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let es = LangId::new("es").expect("valid id");
        Self {
            seed: 7,
            corpus: CorpusConfig::default(),
            encoder: EncoderConfig::new(0),
            encoder_train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            translator: TranslatorConfig::new(64, vec![es]),
            translator_train: TrainConfig {
                epochs: 10,
                lr_peak: 2e-3,
                warmup: 400,
                ..TrainConfig::default()
            },
            eval_source: None,
            eval_smooth: false,
            ablate_n_sub: vec![1, 16],
            ablate_seeds: vec![1, 2, 3],
            ablate_bypass: true,
            export_sentences: 100,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| Failure::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Failure::config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> CliResult<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_langs(key: &str, value: &str) -> CliResult<Vec<LangId>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| LangId::new(s).map_err(|e| Failure::config(format!("{key}: {e}"))))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn set_train(t: &mut TrainConfig, key: &str, field: &str, value: &str) -> CliResult<bool> {
    match field {
        "epochs" => t.epochs = parse(key, value)?,
        "batch_size" => t.batch_size = parse(key, value)?,
        "lr_init" => t.lr_init = parse(key, value)?,
        "lr_peak" => t.lr_peak = parse(key, value)?,
        "warmup" => t.warmup = parse(key, value)?,
        "dropout" => t.dropout = parse(key, value)?,
        "clip_norm" => {
            t.clip_norm = if value == "none" {
                None
            } else {
                Some(parse(key, value)?)
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_entries(prefix: &str, t: &TrainConfig, out: &mut Vec<(String, String)>) {
    let mut push = |k: &str, v: String| out.push((format!("{prefix}.{k}"), v));
    push("epochs", t.epochs.to_string());
    push("batch_size", t.batch_size.to_string());
    push("lr_init", t.lr_init.to_string());
    push("lr_peak", t.lr_peak.to_string());
    push("warmup", t.warmup.to_string());
    push("dropout", t.dropout.to_string());
    push("clip_norm", t.clip_norm.map_or("none".to_string(), |c| c.to_string()));
}

impl ExperimentConfig {
    /// Defaults overridden by a configuration file.
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn from_text(text: &str, path: &Path) -> CliResult<Self> {
        let mut c = Self::default();
        let entries = parse_key_values(text, path).map_err(|e| Failure::config(e.to_string()))?;
        for (line, k, v) in entries {
            c.set(&k, &v)
                .map_err(|f| Failure::config(format!("{}:{line}: {}", path.display(), f.message)))?;
        }
        Ok(c)
    }

    /// Applies one override. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "corpus.num_concepts" => self.corpus.grammar.num_concepts = parse(key, value)?,
            "corpus.min_len" => self.corpus.grammar.min_len = parse(key, value)?,
            "corpus.max_len" => self.corpus.grammar.max_len = parse(key, value)?,
            "corpus.transitions" => {
                self.corpus.grammar.transitions = value
                    .parse::<Transitions>()
                    .map_err(|e| Failure::config(format!("{key}: {e}")))?
            }
            "corpus.units_per_concept" => self.corpus.units_per_concept = parse(key, value)?,
            "corpus.train_per_lang" => self.corpus.train_per_lang = parse(key, value)?,
            "corpus.eval_sentences" => self.corpus.eval_sentences = parse(key, value)?,
            "corpus.languages" => {
                let ids = parse_langs(key, value)?;
                let old = std::mem::take(&mut self.corpus.languages);
                self.corpus.languages = ids
                    .into_iter()
                    .map(|id| {
                        old.iter().find(|l| l.id == id).cloned().unwrap_or(LanguageSpec {
                            id,
                            reorder: ReorderRule::Identity,
                            durations: DurationProfile::default(),
                        })
                    })
                    .collect();
            }
            "encoder.d_model" => self.encoder.d_model = parse(key, value)?,
            "encoder.dim" => self.encoder.dim = parse(key, value)?,
            "encoder.layers" => self.encoder.layers = parse(key, value)?,
            "encoder.heads" => self.encoder.heads = parse(key, value)?,
            "encoder.ffn" => self.encoder.ffn = parse(key, value)?,
            "translator.n_sub" => self.translator.n_sub = parse(key, value)?,
            "translator.d_model" => self.translator.d_model = parse(key, value)?,
            "translator.layers" => self.translator.layers = parse(key, value)?,
            "translator.heads" => self.translator.heads = parse(key, value)?,
            "translator.ffn" => self.translator.ffn = parse(key, value)?,
            "translator.kernel" => self.translator.kernel = parse(key, value)?,
            "translator.semantic_encoder" => self.translator.semantic_encoder = parse_bool(key, value)?,
            "translator.alpha" => self.translator.alpha = parse(key, value)?,
            "translator.lambda_dur" => self.translator.lambda_dur = parse(key, value)?,
            "translator.targets" => self.translator.targets = parse_langs(key, value)?,
            "eval.source" => {
                self.eval_source = match value {
                    "" | "all" => None,
                    v => Some(LangId::new(v).map_err(|e| Failure::config(format!("{key}: {e}")))?),
                }
            }
            "eval.smooth" => self.eval_smooth = parse_bool(key, value)?,
            "ablate.n_sub" => self.ablate_n_sub = parse_list(key, value)?,
            "ablate.seeds" => self.ablate_seeds = parse_list(key, value)?,
            "ablate.bypass" => self.ablate_bypass = parse_bool(key, value)?,
            "export.sentences" => self.export_sentences = parse(key, value)?,
            _ => {
                if let Some(field) = key.strip_prefix("encoder.train.") {
                    if set_train(&mut self.encoder_train, key, field, value)? {
                        return Ok(());
                    }
                } else if let Some(field) = key.strip_prefix("translator.train.") {
                    if set_train(&mut self.translator_train, key, field, value)? {
                        return Ok(());
                    }
                } else if let Some(rest) = key.strip_prefix("corpus.lang.") {
                    if let Some((id, field)) = rest.split_once('.') {
                        return self.set_language(key, id, field, value);
                    }
                }
                return Err(Failure::config(format!("unknown key {key}")));
            }
        }
        Ok(())
    }

    fn set_language(&mut self, key: &str, id: &str, field: &str, value: &str) -> CliResult<()> {
        let spec = self
            .corpus
            .languages
            .iter_mut()
            .find(|l| l.id.as_str() == id)
            .ok_or_else(|| Failure::config(format!("{key}: language {id} is not in corpus.languages")))?;
        let bad = |e: unitrans_core::Error| Failure::config(format!("{key}: {e}"));
        match field {
            "reorder" => spec.reorder = value.parse().map_err(bad)?,
            "durations" => spec.durations = value.parse().map_err(bad)?,
            _ => return Err(Failure::config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        let g = &self.corpus.grammar;
        push("seed", self.seed.to_string());
        push("corpus.num_concepts", g.num_concepts.to_string());
        push("corpus.min_len", g.min_len.to_string());
        push("corpus.max_len", g.max_len.to_string());
        push("corpus.transitions", g.transitions.to_string());
        push("corpus.units_per_concept", self.corpus.units_per_concept.to_string());
        push("corpus.train_per_lang", self.corpus.train_per_lang.to_string());
        push("corpus.eval_sentences", self.corpus.eval_sentences.to_string());
        let ids: Vec<&LangId> = self.corpus.languages.iter().map(|l| &l.id).collect();
        push("corpus.languages", join(&ids));
        for l in &self.corpus.languages {
            push(&format!("corpus.lang.{}.reorder", l.id), l.reorder.to_string());
            push(&format!("corpus.lang.{}.durations", l.id), l.durations.to_string());
        }
        let e = &self.encoder;
        push("encoder.d_model", e.d_model.to_string());
        push("encoder.dim", e.dim.to_string());
        push("encoder.layers", e.layers.to_string());
        push("encoder.heads", e.heads.to_string());
        push("encoder.ffn", e.ffn.to_string());
        let t = &self.translator;
        push("translator.n_sub", t.n_sub.to_string());
        push("translator.d_model", t.d_model.to_string());
        push("translator.layers", t.layers.to_string());
        push("translator.heads", t.heads.to_string());
        push("translator.ffn", t.ffn.to_string());
        push("translator.kernel", t.kernel.to_string());
        push("translator.semantic_encoder", t.semantic_encoder.to_string());
        push("translator.alpha", t.alpha.to_string());
        push("translator.lambda_dur", t.lambda_dur.to_string());
        push("translator.targets", join(&t.targets));
        push(
            "eval.source",
            self.eval_source.as_ref().map_or("all".to_string(), ToString::to_string),
        );
        push("eval.smooth", self.eval_smooth.to_string());
        push("ablate.n_sub", join(&self.ablate_n_sub));
        push("ablate.seeds", join(&self.ablate_seeds));
        push("ablate.bypass", self.ablate_bypass.to_string());
        push("export.sentences", self.export_sentences.to_string());
        train_entries("encoder.train", &self.encoder_train, &mut out);
        train_entries("translator.train", &self.translator_train, &mut out);
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    /// Checks every cross-field invariant, naming the offending key.
    pub fn validate(&self) -> CliResult<()> {
        self.corpus_config().validate()?;
        self.encoder_config(1).validate()?;
        self.translator_config().validate()?;
        self.encoder_train.validate()?;
        self.translator_train.validate()?;
        let known = |l: &LangId| self.corpus.languages.iter().any(|s| &s.id == l);
        if let Some(t) = self.translator.targets.iter().find(|t| !known(t)) {
            return Err(Failure::config(format!(
                "translator.targets: language {t} is not in corpus.languages"
            )));
        }
        if let Some(s) = self.eval_source.as_ref().filter(|s| !known(s)) {
            return Err(Failure::config(format!(
                "eval.source: language {s} is not in corpus.languages"
            )));
        }
        if let Some(n) = self.ablate_n_sub.iter().find(|&&n| n == 0 || self.encoder.dim % n != 0) {
            return Err(Failure::config(format!(
                "ablate.n_sub: {n} does not divide encoder.dim = {}",
                self.encoder.dim
            )));
        }
        if self.ablate_n_sub.is_empty() || self.ablate_seeds.is_empty() {
            return Err(Failure::config("ablate.n_sub and ablate.seeds must be non-empty"));
        }
        if self.export_sentences == 0 {
            return Err(Failure::config("export.sentences must be positive"));
        }
        Ok(())
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed,
            ..self.corpus.clone()
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            ..self.encoder.clone()
        }
    }

    pub fn encoder_seed(&self) -> u64 {
        derive_seed(self.seed, TAG_ENCODER_INIT)
    }

    pub fn anchor_seed(&self) -> u64 {
        derive_seed(self.seed, TAG_ANCHOR)
    }

    pub fn encoder_train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, TAG_ENCODER_TRAIN),
            ..self.encoder_train.clone()
        }
    }

    pub fn translator_config(&self) -> TranslatorConfig {
        TranslatorConfig {
            dim: self.encoder.dim,
            ..self.translator.clone()
        }
    }

    /// Initialisation seed of a translator trained under `model_seed`.
    pub fn translator_seed(model_seed: u64) -> u64 {
        derive_seed(model_seed, TAG_TRANSLATOR_INIT)
    }

    pub fn translator_train_config(&self, model_seed: u64) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(model_seed, TAG_TRANSLATOR_TRAIN),
            ..self.translator_train.clone()
        }
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, TAG_EVAL)
    }
}

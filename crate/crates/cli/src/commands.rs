//! Subcommand definitions and their file-level behaviour.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use unitrans_core::evalkit::{corpus_bleu, purity_summary};
use unitrans_core::synthlang::{
    build_corpus, format_units, parse_units, read_corpus, write_corpus, ConceptSentence, EvalPair, EVAL_FILE,
};
use unitrans_core::translator::translate_batch;
use unitrans_core::LangId;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::experiment::{self, EncoderMetrics};
use crate::failure::{CliResult, Failure, FailureKind};

pub const CONFIG_ECHO: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.json";
pub const ENCODER_CKPT: &str = "encoder.ckpt";
pub const TRANSLATOR_CKPT: &str = "translator.ckpt";
pub const TRANSLATIONS_FILE: &str = "translations.tsv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";
pub const EMBEDDINGS_CSV: &str = "embeddings.csv";

#[derive(Debug, Parser)]
#[command(
    name = "unitrans",
    version,
    about = "Translate discrete-unit utterances through a sentence embedding"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key=value configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Experiment seed; overrides `seed` from the file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Any configuration key, applied after the file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// Comma-separated target languages.
    #[arg(long = "target-lang", value_name = "LANGS")]
    pub target_lang: Option<String>,
    #[arg(long = "n-sub")]
    pub n_sub: Option<usize>,
    /// Replace the convolutional semantic encoder by a linear projection.
    #[arg(long = "no-semantic-encoder")]
    pub no_semantic_encoder: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multilingual corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the sentence encoder on every language of a corpus.
    TrainEncoder {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a translator on target-language utterances only.
    TrainTranslator {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Translate unit sequences, one per line.
    Translate {
        #[arg(long)]
        translator: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "target-lang")]
        target_lang: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a translator on evaluation pairs.
    Evaluate {
        #[arg(long)]
        translator: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        /// An eval pairs file or a corpus directory.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only score these comma-separated targets.
        #[arg(long = "target-lang")]
        target_lang: Option<String>,
    },
    /// Sweep N_sub and the semantic encoder over several seeds.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Write eval-sentence embeddings and their 2-D projection as CSV.
    ExportEmbeddings {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// File values, then `--set`, then the dedicated flags.
pub fn effective_config(common: &Common, model: Option<&ModelFlags>) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::new(FailureKind::Usage, format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(m) = model {
        if let Some(t) = &m.target_lang {
            cfg.set("translator.targets", t)?;
        }
        if let Some(n) = m.n_sub {
            cfg.translator.n_sub = n;
        }
        if m.no_semantic_encoder {
            cfg.translator.semantic_encoder = false;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(out: &Path, cfg: &ExperimentConfig) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| Failure::io(out, e))?;
    write(&out.join(CONFIG_ECHO), &cfg.to_text())
}

fn write(path: &Path, body: &str) -> CliResult<()> {
    fs::write(path, body).map_err(|e| Failure::io(path, e))
}

/// Pretty JSON with a trailing newline; key order follows the struct.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("metrics serialize");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct WithConfig<'a, T: Serialize> {
    #[serde(flatten)]
    body: &'a T,
    config: BTreeMap<String, String>,
}

fn write_json<T: Serialize>(path: &Path, body: &T, cfg: &ExperimentConfig) -> CliResult<()> {
    let wrapped = WithConfig {
        body,
        config: cfg.entries().into_iter().collect(),
    };
    write(path, &to_json(&wrapped))
}

fn log(msg: impl AsRef<str>) {
    eprintln!("unitrans: {}", msg.as_ref());
}

#[derive(Serialize)]
pub struct EncoderRun {
    pub training: unitrans_core::training::TrainReport,
    pub retrieval: EncoderMetrics,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenCorpus { out } => {
            let cfg = effective_config(&cli.common, None)?;
            let corpus = build_corpus(&cfg.corpus_config())?;
            let manifest = write_corpus(&corpus, &out)?;
            write(&out.join(CONFIG_ECHO), &cfg.to_text())?;
            println!("{}", manifest.display());
        }
        Command::TrainEncoder { corpus, out } => {
            let cfg = effective_config(&cli.common, None)?;
            let corpus = read_corpus(&corpus)?;
            prepare_out(&out, &cfg)?;
            let t = Instant::now();
            let (model, trained) = experiment::fit_encoder(&cfg, &corpus)?;
            log(format!(
                "encoder trained for {} steps in {:.1?}",
                trained.report.steps,
                t.elapsed()
            ));
            let retrieval = experiment::encoder_metrics(&model, &corpus, cfg.eval_seed())?;
            Checkpoint::from_encoder(&model, Some(&trained.optimizer), &cfg.to_text()).save(&out.join(ENCODER_CKPT))?;
            let run = EncoderRun {
                training: trained.report,
                retrieval,
            };
            write_json(&out.join(METRICS_FILE), &run, &cfg)?;
            println!("{}", out.join(ENCODER_CKPT).display());
        }
        Command::TrainTranslator {
            corpus,
            encoder,
            out,
            model,
        } => {
            let cfg = effective_config(&cli.common, Some(&model))?;
            let corpus = read_corpus(&corpus)?;
            let encoder = Checkpoint::load(&encoder)?.to_encoder()?;
            prepare_out(&out, &cfg)?;
            let t = Instant::now();
            let (translator, trained) =
                experiment::fit_translator(&cfg, cfg.translator_config(), cfg.seed, &corpus, &encoder)?;
            log(format!(
                "translator trained for {} steps in {:.1?}",
                trained.report.steps,
                t.elapsed()
            ));
            Checkpoint::from_translator(&translator, Some(&trained.optimizer), &cfg.to_text())
                .save(&out.join(TRANSLATOR_CKPT))?;
            let metrics = experiment::translator_training_metrics(&translator, &encoder, &corpus, trained.report)?;
            write_json(&out.join(METRICS_FILE), &metrics, &cfg)?;
            println!("{}", out.join(TRANSLATOR_CKPT).display());
        }
        Command::Translate {
            translator,
            encoder,
            input,
            target_lang,
            out,
        } => {
            let cfg = effective_config(&cli.common, None)?;
            let model = Checkpoint::load(&translator)?.to_translator()?;
            let encoder = Checkpoint::load(&encoder)?.to_encoder()?;
            let target = LangId::new(target_lang.trim())?;
            let sources = read_unit_lines(&input)?;
            prepare_out(&out, &cfg)?;
            let refs: Vec<&[u32]> = sources.iter().map(Vec::as_slice).collect();
            let outputs = translate_batch(&model, &encoder, &refs, &target)?;
            let mut body = String::new();
            for o in &outputs {
                body.push_str(&format!("{target}\t{}\n", format_units(&o.units)));
            }
            write(&out.join(TRANSLATIONS_FILE), &body)?;
            let truncated = outputs.iter().filter(|o| o.truncated).count();
            if truncated > 0 {
                log(format!(
                    "warning: {truncated} outputs reached the length limit without EOS"
                ));
            }
            let units: Vec<&[u32]> = outputs.iter().map(|o| o.units.as_slice()).collect();
            let summary = TranslateSummary {
                target: target.clone(),
                sequences: outputs.len(),
                truncated,
                purity: purity_summary(&units, &target, model.vocab().layout())?,
            };
            write_json(&out.join(METRICS_FILE), &summary, &cfg)?;
            println!("{}", out.join(TRANSLATIONS_FILE).display());
        }
        Command::Evaluate {
            translator,
            encoder,
            pairs,
            out,
            target_lang,
        } => {
            let cfg = effective_config(&cli.common, None)?;
            let model = Checkpoint::load(&translator)?.to_translator()?;
            let encoder = Checkpoint::load(&encoder)?.to_encoder()?;
            let all = read_pairs(&pairs)?;
            let targets = match target_lang {
                Some(t) => parse_langs(&t)?,
                None => model.config().targets.clone(),
            };
            let selected = experiment::select_pairs(&all, &targets, cfg.eval_source.as_ref());
            prepare_out(&out, &cfg)?;
            let metrics = experiment::evaluate(&model, &encoder, &selected, model.vocab().layout(), cfg.eval_smooth)?;
            write_json(&out.join(METRICS_FILE), &metrics, &cfg)?;
            println!("{}", out.join(METRICS_FILE).display());
        }
        Command::Ablate {
            corpus,
            encoder,
            out,
            model,
        } => {
            let cfg = effective_config(&cli.common, Some(&model))?;
            let corpus = read_corpus(&corpus)?;
            let encoder = Checkpoint::load(&encoder)?.to_encoder()?;
            prepare_out(&out, &cfg)?;
            let table = experiment::ablate(&cfg, &corpus, &encoder)?;
            write(&out.join(ABLATION_CSV), &table.to_csv())?;
            write_json(&out.join(ABLATION_JSON), &table, &cfg)?;
            println!("{}", out.join(ABLATION_CSV).display());
        }
        Command::ExportEmbeddings { encoder, corpus, out } => {
            let cfg = effective_config(&cli.common, None)?;
            let encoder = Checkpoint::load(&encoder)?.to_encoder()?;
            let corpus = read_corpus(&corpus)?;
            prepare_out(&out, &cfg)?;
            let export = experiment::export_embeddings(&encoder, &corpus, cfg.export_sentences, cfg.eval_seed())?;
            write(&out.join(EMBEDDINGS_CSV), &export.to_csv())?;
            write_json(&out.join(METRICS_FILE), &export.projection, &cfg)?;
            println!("{}", out.join(EMBEDDINGS_CSV).display());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TranslateSummary {
    target: LangId,
    sequences: usize,
    truncated: usize,
    purity: unitrans_core::evalkit::PuritySummary,
}

fn parse_langs(s: &str) -> CliResult<Vec<LangId>> {
    s.split(',')
        .map(|t| LangId::new(t.trim()).map_err(Failure::from))
        .collect()
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn units_at(field: &str, path: &Path, line: usize) -> CliResult<Vec<u32>> {
    parse_units(field).map_err(|m| Failure::new(FailureKind::Io, format!("{}:{line}: {m}", path.display())))
}

/// One sequence per line: either bare units or `lang<TAB>units`.
pub fn read_unit_lines(path: &Path) -> CliResult<Vec<Vec<u32>>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let units = line.rsplit('\t').next().unwrap_or(line);
        let seq = units_at(units, path, i + 1)?;
        if seq.is_empty() {
            return Err(Failure::new(
                FailureKind::Data,
                format!("{}:{}: empty unit sequence", path.display(), i + 1),
            ));
        }
        out.push(seq);
    }
    Ok(out)
}

/// Evaluation pairs from a corpus directory or a bare pairs file.
pub fn read_pairs(path: &Path) -> CliResult<Vec<EvalPair>> {
    if path.is_dir() {
        return Ok(read_corpus(path)?.eval);
    }
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Failure::new(
                FailureKind::Io,
                format!(
                    "{}:{}: expected 4 tab-separated fields in {EVAL_FILE} format",
                    path.display(),
                    i + 1
                ),
            ));
        }
        out.push(EvalPair {
            src_lang: LangId::new(f[0])?,
            src: units_at(f[1], path, i + 1)?,
            tgt_lang: LangId::new(f[2])?,
            tgt: units_at(f[3], path, i + 1)?,
            // Bare pairs files carry no transcripts.
            concepts: ConceptSentence(Vec::new()),
        });
    }
    Ok(out)
}

/// Corpus BLEU of copying each source as its own translation.
pub fn copy_source_bleu(pairs: &[&EvalPair]) -> CliResult<f64> {
    let src: Vec<&[u32]> = pairs.iter().map(|p| p.src.as_slice()).collect();
    let tgt: Vec<&[u32]> = pairs.iter().map(|p| p.tgt.as_slice()).collect();
    Ok(corpus_bleu(&src, &tgt, 4, false)?.score)
}

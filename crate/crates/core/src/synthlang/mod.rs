//! Deterministic synthetic languages built over one shared space of meanings.
//!
//! A bigram grammar produces concept sentences; each language turns a
//! sentence into discrete units from its own private ID range, reorders
//! concepts locally and repeats units to model durations. Training splits
//! are monolingual and pairwise disjoint; held-out sentences are realized
//! in every language to form evaluation pairs.

mod corpus;
mod grammar;
mod language;

pub use corpus::{
    build_corpus, format_units, manifest_text, parse_key_values, parse_manifest, parse_units, read_corpus,
    write_corpus, Corpus, CorpusConfig, EvalPair, LanguageSpec, TrainRecord, EVAL_FILE, MANIFEST_FILE, TRAIN_FILE,
};
pub use grammar::{gen_concepts, ConceptSentence, Grammar, GrammarConfig, Transitions};
pub use language::{DurationProfile, LangId, ReorderRule, SyntheticLanguage, UnitLayout, UnitSequence};

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::grammar::{ConceptSentence, Grammar, GrammarConfig};
use super::language::{DurationProfile, LangId, ReorderRule, SyntheticLanguage, UnitLayout, UnitSequence};
use crate::error::{Error, Result};
use crate::seeding;

pub const TRAIN_FILE: &str = "train.tsv";
pub const EVAL_FILE: &str = "eval_pairs.tsv";
pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_FORMAT: &str = "unitrans-corpus-1";

// Seed tags for the independent random streams of a corpus.
const TAG_GRAMMAR: u64 = 1;
const TAG_SENTENCES: u64 = 2;
const TAG_LANGUAGE: u64 = 100;
const TAG_TRAIN_REALIZE: u64 = 1 << 32;
const TAG_EVAL_REALIZE: u64 = 2 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageSpec {
    pub id: LangId,
    pub reorder: ReorderRule,
    pub durations: DurationProfile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub grammar: GrammarConfig,
    pub units_per_concept: u32,
    pub languages: Vec<LanguageSpec>,
    pub train_per_lang: usize,
    pub eval_sentences: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let spec = |id: &str, reorder| LanguageSpec {
            id: LangId::new(id).expect("valid id"),
            reorder,
            durations: DurationProfile::default(),
        };
        Self {
            seed: 7,
            grammar: GrammarConfig::default(),
            units_per_concept: 2,
            languages: vec![
                spec("en", ReorderRule::Identity),
                spec("es", ReorderRule::SwapPairs { offset: 1 }),
                spec("fr", ReorderRule::ReverseWindows { width: 3 }),
            ],
            train_per_lang: 5000,
            eval_sentences: 500,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        if self.languages.len() < 2 {
            return Err(Error::Config(format!(
                "a corpus needs at least 2 languages, got {}",
                self.languages.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in &self.languages {
            if !seen.insert(&l.id) {
                return Err(Error::Config(format!("language {} configured twice", l.id)));
            }
            l.durations.validate()?;
        }
        if self.units_per_concept < 2 {
            return Err(Error::Config(format!(
                "units_per_concept must be at least 2, got {}",
                self.units_per_concept
            )));
        }
        if self.train_per_lang == 0 || self.eval_sentences == 0 {
            return Err(Error::Config(
                "train_per_lang and eval_sentences must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The languages this configuration describes, with disjoint unit ranges.
    pub fn build_languages(&self) -> Vec<SyntheticLanguage> {
        let span = self.grammar.num_concepts as u32 * self.units_per_concept;
        self.languages
            .iter()
            .enumerate()
            .map(|(i, spec)| SyntheticLanguage {
                id: spec.id.clone(),
                unit_base: i as u32 * span,
                units_per_concept: self.units_per_concept,
                num_concepts: self.grammar.num_concepts as u32,
                reorder: spec.reorder,
                durations: spec.durations,
                seed: seeding::derive_seed(self.seed, TAG_LANGUAGE + i as u64),
            })
            .collect()
    }

    pub fn grammar(&self) -> Result<Grammar> {
        Grammar::generate(&self.grammar, seeding::derive_seed(self.seed, TAG_GRAMMAR))
    }
}

/// One monolingual training utterance with its transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub lang: LangId,
    pub units: UnitSequence,
    pub concepts: ConceptSentence,
}

/// A held-out pair of realizations of one sentence in two languages.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub src_lang: LangId,
    pub src: UnitSequence,
    pub tgt_lang: LangId,
    pub tgt: UnitSequence,
    pub concepts: ConceptSentence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub languages: Vec<SyntheticLanguage>,
    pub train: Vec<TrainRecord>,
    /// Every eval sentence contributes one pair per ordered language pair,
    /// sentence-major.
    pub eval: Vec<EvalPair>,
}

impl Corpus {
    pub fn layout(&self) -> UnitLayout {
        UnitLayout::from_languages(&self.languages).expect("config validated")
    }

    pub fn language(&self, id: &LangId) -> Option<&SyntheticLanguage> {
        self.languages.iter().find(|l| &l.id == id)
    }

    /// Monolingual training records of one language.
    pub fn train_for<'a>(&'a self, lang: &'a LangId) -> impl Iterator<Item = &'a TrainRecord> + 'a {
        self.train.iter().filter(move |r| &r.lang == lang)
    }

    /// Evaluation pairs for one direction, in sentence order.
    pub fn eval_direction<'a>(&'a self, src: &'a LangId, tgt: &'a LangId) -> impl Iterator<Item = &'a EvalPair> + 'a {
        self.eval
            .iter()
            .filter(move |p| &p.src_lang == src && &p.tgt_lang == tgt)
    }

    /// One pair per eval sentence, cycling through the directions.
    pub fn eval_mixed(&self) -> Vec<&EvalPair> {
        let per_sentence = self.languages.len() * (self.languages.len() - 1);
        self.eval
            .chunks(per_sentence)
            .enumerate()
            .map(|(i, chunk)| &chunk[i % chunk.len()])
            .collect()
    }

    /// Checks the split invariants: every record's units lie in its own
    /// language's range, no training sentence is realized in two languages,
    /// and no evaluation sentence occurs in training.
    pub fn audit(&self) -> Result<()> {
        let layout = self.layout();
        let mut owner: BTreeMap<&ConceptSentence, &LangId> = BTreeMap::new();
        for r in &self.train {
            check_units(&layout, &r.lang, &r.units)?;
            if let Some(prev) = owner.insert(&r.concepts, &r.lang) {
                if prev != &r.lang {
                    return Err(Error::ContractViolation(format!(
                        "sentence {:?} realized in both {prev} and {}",
                        r.concepts.0, r.lang
                    )));
                }
            }
        }
        for p in &self.eval {
            check_units(&layout, &p.src_lang, &p.src)?;
            check_units(&layout, &p.tgt_lang, &p.tgt)?;
            if owner.contains_key(&p.concepts) {
                return Err(Error::ContractViolation(format!(
                    "evaluation sentence {:?} also appears in training",
                    p.concepts.0
                )));
            }
        }
        Ok(())
    }
}

fn check_units(layout: &UnitLayout, lang: &LangId, units: &[u32]) -> Result<()> {
    let range = layout
        .range(lang)
        .ok_or_else(|| Error::ContractViolation(format!("unknown language {lang}")))?;
    if let Some(u) = units.iter().find(|u| !range.contains(u)) {
        return Err(Error::ContractViolation(format!(
            "unit {u} in a {lang} record lies outside {range:?}"
        )));
    }
    Ok(())
}

/// Draws globally distinct training sentences for every language
/// (round-robin), then unseen evaluation sentences realized in all languages.
pub fn build_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let grammar = config.grammar()?;
    let languages = config.build_languages();
    let mut rng = seeding::child_rng(config.seed, TAG_SENTENCES);
    let mut used: HashSet<ConceptSentence> = HashSet::new();
    let needed = config.train_per_lang * languages.len() + config.eval_sentences;
    let max_draws = needed.saturating_mul(200);
    let mut draws = 0usize;
    let mut fresh = |used: &mut HashSet<ConceptSentence>| -> Result<ConceptSentence> {
        loop {
            draws += 1;
            if draws > max_draws {
                return Err(Error::Config(format!(
                    "grammar cannot supply {needed} distinct sentences; enlarge it or shrink the corpus"
                )));
            }
            let s = grammar.sample(&mut rng);
            if used.insert(s.clone()) {
                return Ok(s);
            }
        }
    };

    let mut per_lang: Vec<Vec<ConceptSentence>> = vec![Vec::new(); languages.len()];
    for _ in 0..config.train_per_lang {
        for bucket in per_lang.iter_mut() {
            bucket.push(fresh(&mut used)?);
        }
    }
    let eval_sentences: Vec<ConceptSentence> = (0..config.eval_sentences)
        .map(|_| fresh(&mut used))
        .collect::<Result<_>>()?;

    let mut train = Vec::with_capacity(config.train_per_lang * languages.len());
    for (lang, sentences) in languages.iter().zip(&per_lang) {
        for (j, s) in sentences.iter().enumerate() {
            train.push(TrainRecord {
                lang: lang.id.clone(),
                units: lang.realize(s, TAG_TRAIN_REALIZE + j as u64)?,
                concepts: s.clone(),
            });
        }
    }

    let mut eval = Vec::new();
    for (i, s) in eval_sentences.iter().enumerate() {
        let realized: Vec<UnitSequence> = languages
            .iter()
            .map(|l| l.realize(s, TAG_EVAL_REALIZE + i as u64))
            .collect::<Result<_>>()?;
        for (a, la) in languages.iter().enumerate() {
            for (b, lb) in languages.iter().enumerate() {
                if a != b {
                    eval.push(EvalPair {
                        src_lang: la.id.clone(),
                        src: realized[a].clone(),
                        tgt_lang: lb.id.clone(),
                        tgt: realized[b].clone(),
                        concepts: s.clone(),
                    });
                }
            }
        }
    }

    let corpus = Corpus {
        config: config.clone(),
        languages,
        train,
        eval,
    };
    corpus.audit()?;
    Ok(corpus)
}

pub fn format_units(units: &[u32]) -> String {
    let mut out = String::with_capacity(units.len() * 4);
    for (i, u) in units.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{u}").expect("writing to a String");
    }
    out
}

pub fn parse_units(field: &str) -> std::result::Result<UnitSequence, String> {
    field
        .split_ascii_whitespace()
        .map(|t| t.parse::<u32>().map_err(|_| format!("bad unit id {t:?}")))
        .collect()
}

pub fn manifest_text(config: &CorpusConfig, train_records: usize, eval_pairs: usize) -> String {
    let mut m = String::new();
    let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(m, "{k}={v}").expect("String write");
    kv("format", &MANIFEST_FORMAT);
    kv("seed", &config.seed);
    kv("num_concepts", &config.grammar.num_concepts);
    kv("min_len", &config.grammar.min_len);
    kv("max_len", &config.grammar.max_len);
    kv("transitions", &config.grammar.transitions);
    kv("units_per_concept", &config.units_per_concept);
    kv("train_per_lang", &config.train_per_lang);
    kv("eval_sentences", &config.eval_sentences);
    let ids: Vec<&str> = config.languages.iter().map(|l| l.id.as_str()).collect();
    kv("languages", &ids.join(","));
    for (spec, lang) in config.languages.iter().zip(config.build_languages()) {
        kv(&format!("lang.{}.reorder", spec.id), &spec.reorder);
        kv(&format!("lang.{}.durations", spec.id), &spec.durations);
        kv(&format!("lang.{}.unit_base", spec.id), &lang.unit_base);
        kv(&format!("lang.{}.seed", spec.id), &lang.seed);
    }
    kv("train_records", &train_records);
    kv("eval_pairs", &eval_pairs);
    m
}

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<CorpusConfig> {
    let entries = parse_key_values(text, path)?;
    let map: BTreeMap<&str, (usize, &str)> = entries
        .iter()
        .map(|(line, k, v)| (k.as_str(), (*line, v.as_str())))
        .collect();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let get = |k: &str| -> Result<(usize, &str)> {
        map.get(k)
            .copied()
            .ok_or_else(|| parse_err(0, format!("manifest lacks key {k}")))
    };
    fn num<T: std::str::FromStr>(v: (usize, &str), k: &str, path: &Path) -> Result<T> {
        v.1.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: v.0,
            msg: format!("bad value for {k}: {:?}", v.1),
        })
    }
    let format = get("format")?;
    if format.1 != MANIFEST_FORMAT {
        return Err(parse_err(
            format.0,
            format!("unsupported manifest format {:?}", format.1),
        ));
    }
    let grammar = GrammarConfig {
        num_concepts: num(get("num_concepts")?, "num_concepts", path)?,
        min_len: num(get("min_len")?, "min_len", path)?,
        max_len: num(get("max_len")?, "max_len", path)?,
        transitions: get("transitions")?
            .1
            .parse()
            .map_err(|e: Error| parse_err(get("transitions").map(|v| v.0).unwrap_or(0), e.to_string()))?,
    };
    let mut languages = Vec::new();
    for id in get("languages")?.1.split(',') {
        let id = LangId::new(id.trim())?;
        let reorder_entry = get(&format!("lang.{id}.reorder"))?;
        let durations_entry = get(&format!("lang.{id}.durations"))?;
        languages.push(LanguageSpec {
            reorder: reorder_entry
                .1
                .parse()
                .map_err(|e: Error| parse_err(reorder_entry.0, e.to_string()))?,
            durations: durations_entry
                .1
                .parse()
                .map_err(|e: Error| parse_err(durations_entry.0, e.to_string()))?,
            id,
        });
    }
    let config = CorpusConfig {
        seed: num(get("seed")?, "seed", path)?,
        grammar,
        units_per_concept: num(get("units_per_concept")?, "units_per_concept", path)?,
        languages,
        train_per_lang: num(get("train_per_lang")?, "train_per_lang", path)?,
        eval_sentences: num(get("eval_sentences")?, "eval_sentences", path)?,
    };
    config.validate()?;
    for lang in config.build_languages() {
        for (key, expected) in [("unit_base", u64::from(lang.unit_base)), ("seed", lang.seed)] {
            let entry = get(&format!("lang.{}.{key}", lang.id))?;
            let found: u64 = num(entry, key, path)?;
            if found != expected {
                return Err(parse_err(
                    entry.0,
                    format!("lang.{}.{key} is {found}, configuration implies {expected}", lang.id),
                ));
            }
        }
    }
    Ok(config)
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut train = String::new();
    for r in &corpus.train {
        writeln!(train, "{}\t{}", r.lang, format_units(&r.units)).expect("String write");
    }
    let mut eval = String::new();
    for p in &corpus.eval {
        writeln!(
            eval,
            "{}\t{}\t{}\t{}",
            p.src_lang,
            format_units(&p.src),
            p.tgt_lang,
            format_units(&p.tgt)
        )
        .expect("String write");
    }
    let manifest = manifest_text(&corpus.config, corpus.train.len(), corpus.eval.len());
    for (name, body) in [
        (TRAIN_FILE, train),
        (EVAL_FILE, eval),
        (MANIFEST_FILE, manifest.clone()),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(dir.join(MANIFEST_FILE))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads a corpus directory, recovering each record's transcript from the
/// language definitions in the manifest.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let config = parse_manifest(&read_text(&manifest_path)?, &manifest_path)?;
    let languages = config.build_languages();
    let find = |id: &str, path: &Path, line: usize| -> Result<&SyntheticLanguage> {
        languages
            .iter()
            .find(|l| l.id.as_str() == id)
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("unknown language {id:?}"),
            })
    };
    let at = |path: &Path, line: usize| {
        let path = path.to_path_buf();
        move |msg: String| Error::Parse {
            path: path.clone(),
            line,
            msg,
        }
    };

    let train_path = dir.join(TRAIN_FILE);
    let mut train = Vec::new();
    for (i, line) in read_text(&train_path)?.lines().enumerate() {
        let n = i + 1;
        let err = at(&train_path, n);
        let fields: Vec<&str> = line.split('\t').collect();
        let [lang, units] = fields.as_slice() else {
            return Err(err(format!("expected 2 tab-separated fields, got {}", fields.len())));
        };
        let lang = find(lang, &train_path, n)?;
        let units = parse_units(units).map_err(&err)?;
        let concepts = lang.transcribe(&units).map_err(|e| err(e.to_string()))?;
        train.push(TrainRecord {
            lang: lang.id.clone(),
            units,
            concepts,
        });
    }

    let eval_path = dir.join(EVAL_FILE);
    let mut eval = Vec::new();
    for (i, line) in read_text(&eval_path)?.lines().enumerate() {
        let n = i + 1;
        let err = at(&eval_path, n);
        let fields: Vec<&str> = line.split('\t').collect();
        let [src_lang, src, tgt_lang, tgt] = fields.as_slice() else {
            return Err(err(format!("expected 4 tab-separated fields, got {}", fields.len())));
        };
        let (sl, tl) = (find(src_lang, &eval_path, n)?, find(tgt_lang, &eval_path, n)?);
        let (src, tgt) = (parse_units(src).map_err(&err)?, parse_units(tgt).map_err(&err)?);
        let concepts = tl.transcribe(&tgt).map_err(|e| err(e.to_string()))?;
        if sl.transcribe(&src).map_err(|e| err(e.to_string()))? != concepts {
            return Err(err("source and target realize different sentences".into()));
        }
        eval.push(EvalPair {
            src_lang: sl.id.clone(),
            src,
            tgt_lang: tl.id.clone(),
            tgt,
            concepts,
        });
    }

    let corpus = Corpus {
        config,
        languages,
        train,
        eval,
    };
    corpus.audit()?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            train_per_lang: 60,
            eval_sentences: 10,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn needs_two_languages() {
        let mut cfg = small();
        cfg.languages.truncate(1);
        assert!(matches!(build_corpus(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn splits_have_expected_sizes() {
        let c = build_corpus(&small()).unwrap();
        assert_eq!(c.train.len(), 180);
        assert_eq!(c.eval.len(), 10 * 6);
        assert_eq!(c.eval_mixed().len(), 10);
        let en = LangId::new("en").unwrap();
        let es = LangId::new("es").unwrap();
        assert_eq!(c.eval_direction(&es, &en).count(), 10);
    }

    #[test]
    fn audit_catches_parallel_training_data() {
        let mut c = build_corpus(&small()).unwrap();
        let mut leak = c.train[0].clone();
        let other = &c.languages[1];
        leak.lang = other.id.clone();
        leak.units = other.realize(&leak.concepts, 3).unwrap();
        c.train.push(leak);
        assert!(matches!(c.audit(), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let c = build_corpus(&small()).unwrap();
        write_corpus(&c, dir.path()).unwrap();
        let path = dir.path().join(TRAIN_FILE);
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("en\t1 2 x\n");
        fs::write(&path, text).unwrap();
        match read_corpus(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 181),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trips() {
        let cfg = small();
        let text = manifest_text(&cfg, 1, 2);
        assert_eq!(parse_manifest(&text, Path::new("m")).unwrap(), cfg);
    }
}

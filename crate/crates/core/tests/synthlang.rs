use std::collections::HashSet;
use std::fs;

use unitrans_core::synthlang::{
    build_corpus, gen_concepts, read_corpus, write_corpus, CorpusConfig, DurationProfile, GrammarConfig, LangId,
    ReorderRule, SyntheticLanguage, Transitions, UnitLayout, EVAL_FILE, MANIFEST_FILE, TRAIN_FILE,
};
use unitrans_core::ConceptSentence;

fn lang(id: &str, base: u32, k: u32, reorder: ReorderRule, durations: DurationProfile) -> SyntheticLanguage {
    SyntheticLanguage {
        id: LangId::new(id).unwrap(),
        unit_base: base,
        units_per_concept: k,
        num_concepts: 64,
        reorder,
        durations,
        seed: 5,
    }
}

#[test]
fn realize_plain_language_offsets_concepts() {
    let l = lang("a", 100, 1, ReorderRule::Identity, DurationProfile { min: 1, max: 1 });
    let s = ConceptSentence(vec![3, 0, 63, 7]);
    assert_eq!(l.realize(&s, 9).unwrap(), vec![103, 100, 163, 107]);
    assert!(l.realize(&ConceptSentence(vec![]), 9).unwrap().is_empty());
}

#[test]
fn realize_is_pure_in_sentence_seed() {
    let l = lang(
        "a",
        0,
        2,
        ReorderRule::SwapPairs { offset: 1 },
        DurationProfile::default(),
    );
    let s = ConceptSentence(vec![1, 2, 3, 4, 5]);
    assert_eq!(l.realize(&s, 4).unwrap(), l.realize(&s, 4).unwrap());
    let units = l.realize(&s, 4).unwrap();
    assert_eq!(l.transcribe(&units).unwrap(), s);
}

#[test]
fn languages_share_no_units() {
    let cfg = CorpusConfig::default();
    let langs = cfg.build_languages();
    let s = ConceptSentence((0..64).collect());
    let sets: Vec<HashSet<u32>> = langs
        .iter()
        .map(|l| l.realize(&s, 1).unwrap().into_iter().collect())
        .collect();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            assert!(sets[i].is_disjoint(&sets[j]));
        }
    }
    UnitLayout::from_languages(&langs).unwrap();
}

#[test]
fn uniform_grammar_unigrams_within_three_sigma() {
    let cfg = GrammarConfig {
        transitions: Transitions::Uniform,
        ..GrammarConfig::default()
    };
    let c = cfg.num_concepts;
    let mut counts = vec![0u64; c];
    let mut total = 0u64;
    for s in gen_concepts(&cfg, 2024, 20_000).unwrap() {
        for &x in s.concepts() {
            if total == 100_000 {
                break;
            }
            counts[x as usize] += 1;
            total += 1;
        }
    }
    assert_eq!(total, 100_000);
    let p = 1.0 / c as f64;
    let mean = total as f64 * p;
    let sigma = (total as f64 * p * (1.0 - p)).sqrt();
    for (concept, &n) in counts.iter().enumerate() {
        let z = (n as f64 - mean) / sigma;
        assert!(z.abs() <= 3.0, "concept {concept}: count {n}, z = {z:.2}");
    }
}

#[test]
fn disjointness_audit_on_ten_thousand_sentences() {
    let cfg = CorpusConfig {
        train_per_lang: 3_000,
        eval_sentences: 1_000,
        ..CorpusConfig::default()
    };
    let corpus = build_corpus(&cfg).unwrap();
    corpus.audit().unwrap();
    let train: HashSet<&ConceptSentence> = corpus.train.iter().map(|r| &r.concepts).collect();
    assert_eq!(train.len(), 9_000);
    let eval: HashSet<&ConceptSentence> = corpus.eval.iter().map(|p| &p.concepts).collect();
    assert_eq!(eval.len(), 1_000);
    assert!(train.is_disjoint(&eval));
}

#[test]
fn default_corpus_sizes() {
    let corpus = build_corpus(&CorpusConfig::default()).unwrap();
    assert_eq!(corpus.train.len(), 3 * 5_000);
    assert_eq!(corpus.eval_mixed().len(), 500);
    assert_eq!(corpus.eval.len(), 500 * 6);
}

#[test]
fn write_read_round_trip_and_stable_bytes() {
    let cfg = CorpusConfig {
        train_per_lang: 200,
        eval_sentences: 40,
        ..CorpusConfig::default()
    };
    let corpus = build_corpus(&cfg).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_corpus(&corpus, a.path()).unwrap();
    write_corpus(&build_corpus(&cfg).unwrap(), b.path()).unwrap();
    for name in [TRAIN_FILE, EVAL_FILE, MANIFEST_FILE] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap()
        );
    }
    assert_eq!(read_corpus(a.path()).unwrap(), corpus);
}

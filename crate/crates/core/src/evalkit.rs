//! Scoring: corpus BLEU over unit tokens, embedding similarity between
//! translations and references, output-language purity, and a 2-D PCA
//! projection of embeddings.

use std::collections::HashMap;
use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, RngExt};
use serde::Serialize;

use crate::encoder::{cosine, SentenceEmbedding, SentenceEncoder};
use crate::error::{Error, Result};
use crate::seeding;
use crate::synthlang::{LangId, UnitLayout};

/// Power-iteration steps per principal component.
pub const PCA_ITERATIONS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BleuReport {
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU: clipped n-gram matches pooled over all pairs,
/// geometric mean of `p1..p_max_n`, times the brevity penalty. With
/// `smooth`, orders above 1 use add-one counts.
pub fn corpus_bleu<H, R>(hypotheses: &[H], references: &[R], max_n: usize, smooth: bool) -> Result<BleuReport>
where
    H: AsRef<[u32]>,
    R: AsRef<[u32]>,
{
    if hypotheses.is_empty() {
        return Err(Error::Usage("corpus_bleu needs at least one hypothesis".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Usage(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Config("BLEU order must be positive".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            let (m, t) = (matches[i] as f64, totals[i] as f64);
            // No hypothesis n-grams of this order: none can be unmatched.
            if t == 0.0 {
                1.0
            } else if smooth && i > 0 {
                (m + 1.0) / (t + 1.0)
            } else {
                m / t
            }
        })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        brevity_penalty * log_mean.exp() * 100.0
    };
    Ok(BleuReport {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub mean: f64,
    #[serde(skip_serializing)]
    pub per_pair: Vec<f64>,
    pub count: usize,
}

impl SimilarityReport {
    pub fn from_pairs(per_pair: Vec<f64>) -> Result<Self> {
        if per_pair.is_empty() {
            return Err(Error::EmptyInput("similarity report".into()));
        }
        let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
        Ok(Self {
            mean,
            count: per_pair.len(),
            per_pair,
        })
    }
}

/// Cosine between the frozen-encoder embeddings of each translation and its
/// reference.
pub fn similarity_eval<T, R>(encoder: &SentenceEncoder, translated: &[T], reference: &[R]) -> Result<SimilarityReport>
where
    T: AsRef<[u32]>,
    R: AsRef<[u32]>,
{
    if translated.len() != reference.len() {
        return Err(Error::Usage(format!(
            "{} translations but {} references",
            translated.len(),
            reference.len()
        )));
    }
    for (side, list) in [
        ("translation", translated.iter().map(AsRef::as_ref).collect::<Vec<_>>()),
        ("reference", reference.iter().map(AsRef::as_ref).collect::<Vec<_>>()),
    ] {
        if let Some(i) = list.iter().position(|s| s.is_empty()) {
            return Err(Error::EmptyInput(format!("{side} {i} is an empty sequence")));
        }
    }
    let t: Vec<&[u32]> = translated.iter().map(AsRef::as_ref).collect();
    let r: Vec<&[u32]> = reference.iter().map(AsRef::as_ref).collect();
    let et = encoder.encode_batch(&t)?;
    let er = encoder.encode_batch(&r)?;
    let per_pair = et
        .iter()
        .zip(&er)
        .map(|(a, b)| cosine(a, b))
        .collect::<Result<Vec<_>>>()?;
    SimilarityReport::from_pairs(per_pair)
}

/// Dominant language of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Purity {
    /// `None` stands for MIXED: no single plurality language, or no tokens.
    pub lang: Option<LangId>,
    /// Fraction of tokens outside the plurality language's range.
    pub out_of_range: f64,
    pub empty: bool,
}

pub fn language_purity(u: &[u32], layout: &UnitLayout) -> Purity {
    if u.is_empty() {
        return Purity {
            lang: None,
            out_of_range: 0.0,
            empty: true,
        };
    }
    let mut counts = vec![0usize; layout.len()];
    for &x in u {
        if let Some(i) = layout.lang_of(x).and_then(|l| layout.index_of(l)) {
            counts[i] += 1;
        }
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    let winners: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] == best).collect();
    let lang = match winners.as_slice() {
        [i] if best > 0 => layout.languages().nth(*i).cloned(),
        _ => None,
    };
    Purity {
        lang,
        out_of_range: (u.len() - best) as f64 / u.len() as f64,
        empty: false,
    }
}

/// Pooled purity of many outputs requested in one language.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PuritySummary {
    pub requested: LangId,
    pub tokens: usize,
    /// Fraction of all emitted tokens outside the requested language's range.
    pub out_of_range: f64,
    /// Outputs whose plurality language is not the requested one.
    pub wrong_language: usize,
    pub empty: usize,
}

pub fn purity_summary<S: AsRef<[u32]>>(
    outputs: &[S],
    requested: &LangId,
    layout: &UnitLayout,
) -> Result<PuritySummary> {
    let range: Range<u32> = layout
        .range(requested)
        .ok_or_else(|| Error::Config(format!("language {requested} is not in the unit layout")))?;
    let (mut tokens, mut outside, mut wrong, mut empty) = (0, 0, 0, 0);
    for o in outputs {
        let o = o.as_ref();
        tokens += o.len();
        outside += o.iter().filter(|u| !range.contains(u)).count();
        let p = language_purity(o, layout);
        empty += usize::from(p.empty);
        wrong += usize::from(!p.empty && p.lang.as_ref() != Some(requested));
    }
    Ok(PuritySummary {
        requested: requested.clone(),
        tokens,
        out_of_range: if tokens == 0 {
            0.0
        } else {
            outside as f64 / tokens as f64
        },
        wrong_language: wrong,
        empty,
    })
}

/// The metrics file written for every evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub bleu: BleuReport,
    pub similarity: SimilarityReport,
    pub purity: PuritySummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    /// Variance captured by each of the two components.
    pub explained: [f64; 2],
    pub total_variance: f64,
}

/// Projects mean-centred embeddings onto their top two principal directions,
/// found by power iteration with deflation on the covariance matrix.
pub fn project_2d(embeddings: &[SentenceEmbedding], seed: u64) -> Result<Projection> {
    if embeddings.len() < 3 {
        return Err(Error::Usage(format!(
            "project_2d needs at least 3 embeddings, got {}",
            embeddings.len()
        )));
    }
    let d = embeddings[0].dim();
    if let Some(e) = embeddings.iter().find(|e| e.dim() != d) {
        return Err(Error::shape("project_2d", &[d], &[e.dim()]));
    }
    let n = embeddings.len() as f64;
    let mut mean = vec![0.0f64; d];
    for e in embeddings {
        mean.iter_mut()
            .zip(&e.values)
            .for_each(|(m, &x)| *m += f64::from(x) / n);
    }
    let centred: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.values.iter().zip(&mean).map(|(&x, m)| f64::from(x) - m).collect())
        .collect();
    let mut cov = vec![0.0f64; d * d];
    for row in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += row[i] * row[j] / n;
            }
        }
    }
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let scale = cov.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    if total_variance <= 1e-12 * scale.max(1.0) || total_variance == 0.0 {
        return Err(Error::DegenerateProjection("all embeddings are identical".into()));
    }
    let mut rng = seeding::rng(seed);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut explained = [0.0f64; 2];
    for k in 0..2 {
        let v = power_iteration(&cov, d, &dirs, &mut rng);
        let cv = mat_vec(&cov, d, &v);
        explained[k] = dot(&v, &cv).max(0.0);
        dirs.push(v);
    }
    let points = centred
        .iter()
        .map(|row| [dot(row, &dirs[0]), dot(row, &dirs[1])])
        .collect();
    Ok(Projection {
        points,
        explained,
        total_variance,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    m.chunks(d).map(|row| dot(row, v)).collect()
}

fn orthonormalize(v: &mut [f64], against: &[Vec<f64>]) -> f64 {
    for u in against {
        let p = dot(v, u);
        v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
    }
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Unit vector of largest Rayleigh quotient orthogonal to `found`. When the
/// deflated matrix vanishes, any orthogonal unit vector is returned.
fn power_iteration(cov: &[f64], d: usize, found: &[Vec<f64>], rng: &mut impl Rng) -> Vec<f64> {
    let random = |rng: &mut dyn FnMut() -> f64| (0..d).map(|_| rng()).collect::<Vec<f64>>();
    let mut draw = || rng.random_range(-1.0..1.0);
    let mut v = random(&mut draw);
    orthonormalize(&mut v, found);
    for _ in 0..PCA_ITERATIONS {
        let mut w = mat_vec(cov, d, &v);
        if orthonormalize(&mut w, found) <= 1e-300 {
            break;
        }
        v = w;
    }
    if dot(&v, &v) == 0.0 {
        v = vec![0.0; d];
        for i in 0..d {
            v[i] = 1.0;
            if orthonormalize(&mut v, found) > 1e-8 {
                break;
            }
            v = vec![0.0; d];
        }
    }
    v
}

/// Replaces `round(frac·len)` distinct positions of `u` with a different unit
/// drawn uniformly from `range`.
pub fn corrupt_units(u: &[u32], frac: f64, range: Range<u32>, rng: &mut impl Rng) -> Result<Vec<u32>> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::Config(format!(
            "corruption fraction must lie in [0, 1], got {frac}"
        )));
    }
    if range.len() < 2 {
        return Err(Error::Config("corruption needs at least 2 units to choose from".into()));
    }
    let mut out = u.to_vec();
    let k = (frac * u.len() as f64).round() as usize;
    for i in sample(rng, u.len(), k.min(u.len())) {
        loop {
            let x = rng.random_range(range.clone());
            if x != out[i] {
                out[i] = x;
                break;
            }
        }
    }
    Ok(out)
}

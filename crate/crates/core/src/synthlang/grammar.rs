use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// A sentence of meaning: concept IDs in `[0, C)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConceptSentence(pub Vec<u32>);

impl ConceptSentence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn concepts(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transitions {
    /// Every concept may follow every other concept with equal weight.
    Uniform,
    /// Each concept gets `branching` randomly chosen successors with random weights.
    Sparse { branching: usize },
}

impl std::fmt::Display for Transitions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Transitions::Uniform => write!(f, "uniform"),
            Transitions::Sparse { branching } => write!(f, "sparse:{branching}"),
        }
    }
}

impl std::str::FromStr for Transitions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(Transitions::Uniform);
        }
        s.strip_prefix("sparse:")
            .and_then(|b| b.parse().ok())
            .map(|branching| Transitions::Sparse { branching })
            .ok_or_else(|| Error::Config(format!("unknown transition kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrammarConfig {
    pub num_concepts: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub transitions: Transitions,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            num_concepts: 64,
            min_len: 4,
            max_len: 12,
            transitions: Transitions::Sparse { branching: 2 },
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_concepts < 2 {
            return Err(Error::Config(format!(
                "num_concepts must be at least 2, got {}",
                self.num_concepts
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "sentence lengths must satisfy 1 <= min_len <= max_len, got {}..={}",
                self.min_len, self.max_len
            )));
        }
        if let Transitions::Sparse { branching } = self.transitions {
            if branching == 0 || branching >= self.num_concepts {
                return Err(Error::Config(format!(
                    "branching must lie in [1, {}), got {branching}",
                    self.num_concepts
                )));
            }
        }
        Ok(())
    }
}

/// Bigram grammar over concepts: a start distribution and a transition table.
/// Self-transitions are never generated.
#[derive(Debug, Clone)]
pub struct Grammar {
    start: Vec<f64>,
    table: Vec<Vec<f64>>,
    min_len: usize,
    max_len: usize,
}

impl Grammar {
    /// Builds the transition table for `config` from `seed`.
    pub fn generate(config: &GrammarConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.num_concepts;
        let mut rng = seeding::rng(seed);
        let table = match config.transitions {
            Transitions::Uniform => (0..c)
                .map(|i| (0..c).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
                .collect(),
            Transitions::Sparse { branching } => (0..c)
                .map(|i| {
                    let mut row = vec![0.0; c];
                    let mut chosen = 0;
                    while chosen < branching {
                        let j = rng.random_range(0..c);
                        if j != i && row[j] == 0.0 {
                            row[j] = rng.random_range(0.5..1.5);
                            chosen += 1;
                        }
                    }
                    row
                })
                .collect(),
        };
        Self::from_weights(vec![1.0; c], table, config.min_len, config.max_len)
    }

    /// A grammar from explicit weights. Every row must have positive mass
    /// and self-transitions must be zero.
    pub fn from_weights(start: Vec<f64>, table: Vec<Vec<f64>>, min_len: usize, max_len: usize) -> Result<Self> {
        let c = start.len();
        if c < 2 || table.len() != c || table.iter().any(|r| r.len() != c) {
            return Err(Error::Config(
                "transition table must be square over at least 2 concepts".into(),
            ));
        }
        let bad = |w: &f64| !w.is_finite() || *w < 0.0;
        if start.iter().any(bad) || table.iter().flatten().any(bad) {
            return Err(Error::Config(
                "transition weights must be finite and non-negative".into(),
            ));
        }
        if start.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("degenerate grammar: start weights are all zero".into()));
        }
        if let Some(i) = table.iter().position(|r| r.iter().sum::<f64>() <= 0.0) {
            return Err(Error::Config(format!(
                "degenerate grammar: concept {i} has no outgoing transitions"
            )));
        }
        if let Some(i) = (0..c).find(|&i| table[i][i] != 0.0) {
            return Err(Error::Config(format!("concept {i} may follow itself")));
        }
        if min_len == 0 || min_len > max_len {
            return Err(Error::Config(format!("invalid length range {min_len}..={max_len}")));
        }
        Ok(Self {
            start,
            table,
            min_len,
            max_len,
        })
    }

    pub fn num_concepts(&self) -> usize {
        self.start.len()
    }

    pub fn successors(&self, concept: u32) -> impl Iterator<Item = u32> + '_ {
        self.table[concept as usize]
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(j, _)| j as u32)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> ConceptSentence {
        let len = rng.random_range(self.min_len..=self.max_len);
        let mut out = Vec::with_capacity(len);
        let mut cur = pick(&self.start, rng);
        out.push(cur as u32);
        while out.len() < len {
            cur = pick(&self.table[cur], rng);
            out.push(cur as u32);
        }
        ConceptSentence(out)
    }
}

fn pick(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).expect("positive mass")
}

/// `n` sentences from the grammar generated by `seed`; deterministic in `(config, seed)`.
pub fn gen_concepts(config: &GrammarConfig, seed: u64, n: usize) -> Result<Vec<ConceptSentence>> {
    if n == 0 {
        return Err(Error::Usage("gen_concepts needs n >= 1".into()));
    }
    let grammar = Grammar::generate(config, seeding::derive_seed(seed, 0))?;
    let mut rng = seeding::child_rng(seed, 1);
    Ok((0..n).map(|_| grammar.sample(&mut rng)).collect())
}

use std::fmt;
use std::ops::Range;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::grammar::ConceptSentence;
use crate::error::{Error, Result};
use crate::seeding;

/// A discrete-unit utterance: the stand-in for speech.
pub type UnitSequence = Vec<u32>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LangId(String);

impl LangId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !valid {
            return Err(Error::Config(format!("invalid language id {id:?}")));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LangId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Deterministic local permutation of a concept sequence. Every rule is an
/// involution, so applying it twice restores the original order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReorderRule {
    Identity,
    /// Swap positions `(i, i+1)` for `i = offset, offset+2, ...`.
    SwapPairs {
        offset: usize,
    },
    /// Reverse consecutive windows of `width` (a shorter tail window too).
    ReverseWindows {
        width: usize,
    },
}

impl ReorderRule {
    pub fn apply<T: Copy>(&self, xs: &[T]) -> Vec<T> {
        let mut out = xs.to_vec();
        match *self {
            ReorderRule::Identity => {}
            ReorderRule::SwapPairs { offset } => {
                let mut i = offset;
                while i + 1 < out.len() {
                    out.swap(i, i + 1);
                    i += 2;
                }
            }
            ReorderRule::ReverseWindows { width } => {
                for chunk in out.chunks_mut(width.max(1)) {
                    chunk.reverse();
                }
            }
        }
        out
    }
}

impl fmt::Display for ReorderRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReorderRule::Identity => write!(f, "identity"),
            ReorderRule::SwapPairs { offset } => write!(f, "swap-pairs:{offset}"),
            ReorderRule::ReverseWindows { width } => write!(f, "reverse-windows:{width}"),
        }
    }
}

impl std::str::FromStr for ReorderRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown reorder rule {s:?}"));
        if s == "identity" {
            return Ok(ReorderRule::Identity);
        }
        if let Some(v) = s.strip_prefix("swap-pairs:") {
            return Ok(ReorderRule::SwapPairs {
                offset: v.parse().map_err(|_| bad())?,
            });
        }
        if let Some(v) = s.strip_prefix("reverse-windows:") {
            let width: usize = v.parse().map_err(|_| bad())?;
            if width == 0 {
                return Err(bad());
            }
            return Ok(ReorderRule::ReverseWindows { width });
        }
        Err(bad())
    }
}

/// Repeat counts drawn uniformly from `min..=max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DurationProfile {
    pub min: u32,
    pub max: u32,
}

impl Default for DurationProfile {
    fn default() -> Self {
        Self { min: 1, max: 3 }
    }
}

impl DurationProfile {
    pub fn validate(&self) -> Result<()> {
        if self.min == 0 || self.min > self.max {
            return Err(Error::Config(format!(
                "durations must satisfy 1 <= min <= max, got {}-{}",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

impl fmt::Display for DurationProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.min, self.max)
    }
}

impl std::str::FromStr for DurationProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("duration profile {s:?} is not min-max")))?;
        let p = DurationProfile {
            min: a
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad duration {a:?}")))?,
            max: b
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad duration {b:?}")))?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// One toy language: a private unit range, a reordering rule and a duration profile.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLanguage {
    pub id: LangId,
    pub unit_base: u32,
    pub units_per_concept: u32,
    pub num_concepts: u32,
    pub reorder: ReorderRule,
    pub durations: DurationProfile,
    pub seed: u64,
}

impl SyntheticLanguage {
    pub fn unit_range(&self) -> Range<u32> {
        self.unit_base..self.unit_base + self.num_concepts * self.units_per_concept
    }

    /// Surface form of a sentence: concept `c` becomes units
    /// `unit_base + c·k .. unit_base + c·k + k`, concepts are reordered, and
    /// every unit is repeated a random number of times.
    pub fn realize(&self, s: &ConceptSentence, sentence_seed: u64) -> Result<UnitSequence> {
        if let Some(&c) = s.0.iter().find(|&&c| c >= self.num_concepts) {
            return Err(Error::Index {
                op: "realize",
                index: c as usize,
                bound: self.num_concepts as usize,
            });
        }
        let mut rng = seeding::child_rng(self.seed, sentence_seed);
        let k = self.units_per_concept;
        let mut out = Vec::new();
        for c in self.reorder.apply(&s.0) {
            for j in 0..k {
                let unit = self.unit_base + c * k + j;
                let d = rng.random_range(self.durations.min..=self.durations.max);
                out.extend(std::iter::repeat_n(unit, d as usize));
            }
        }
        Ok(out)
    }

    /// Recovers the concept sentence behind a realization. Needs `k >= 2`
    /// so that run boundaries never merge across concepts.
    pub fn transcribe(&self, units: &[u32]) -> Result<ConceptSentence> {
        let k = self.units_per_concept;
        if k < 2 {
            return Err(Error::Config("transcription needs units_per_concept >= 2".into()));
        }
        let range = self.unit_range();
        let mut reduced: Vec<u32> = Vec::new();
        for &u in units {
            if !range.contains(&u) {
                return Err(Error::Invariant(format!(
                    "unit {u} outside {} range {:?}",
                    self.id, range
                )));
            }
            if reduced.last() != Some(&u) {
                reduced.push(u);
            }
        }
        if reduced.len() % k as usize != 0 {
            return Err(Error::Invariant(format!(
                "{} units do not form whole concepts of {k}",
                reduced.len()
            )));
        }
        let mut surface = Vec::with_capacity(reduced.len() / k as usize);
        for group in reduced.chunks(k as usize) {
            let rel = group[0] - self.unit_base;
            if rel % k != 0 || group.iter().enumerate().any(|(j, &u)| u != group[0] + j as u32) {
                return Err(Error::Invariant(format!("malformed concept units {group:?}")));
            }
            surface.push(rel / k);
        }
        Ok(ConceptSentence(self.reorder.apply(&surface)))
    }
}

/// The unit-ID layout shared by every model: each language owns a
/// contiguous, disjoint range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitLayout {
    langs: Vec<(LangId, Range<u32>)>,
}

impl UnitLayout {
    pub fn new(langs: Vec<(LangId, Range<u32>)>) -> Result<Self> {
        if langs.is_empty() {
            return Err(Error::Config("unit layout needs at least one language".into()));
        }
        for (i, (a, ra)) in langs.iter().enumerate() {
            if ra.is_empty() {
                return Err(Error::Config(format!("language {a} has an empty unit range")));
            }
            for (b, rb) in &langs[i + 1..] {
                if a == b {
                    return Err(Error::Config(format!("language {a} listed twice")));
                }
                if ra.start < rb.end && rb.start < ra.end {
                    return Err(Error::Config(format!("unit ranges of {a} and {b} overlap")));
                }
            }
        }
        Ok(Self { langs })
    }

    pub fn from_languages(langs: &[SyntheticLanguage]) -> Result<Self> {
        Self::new(langs.iter().map(|l| (l.id.clone(), l.unit_range())).collect())
    }

    /// One past the largest unit ID.
    pub fn vocab_size(&self) -> usize {
        self.langs.iter().map(|(_, r)| r.end).max().unwrap_or(0) as usize
    }

    pub fn languages(&self) -> impl Iterator<Item = &LangId> {
        self.langs.iter().map(|(l, _)| l)
    }

    pub fn len(&self) -> usize {
        self.langs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.langs.is_empty()
    }

    pub fn index_of(&self, lang: &LangId) -> Option<usize> {
        self.langs.iter().position(|(l, _)| l == lang)
    }

    pub fn range(&self, lang: &LangId) -> Option<Range<u32>> {
        self.langs.iter().find(|(l, _)| l == lang).map(|(_, r)| r.clone())
    }

    pub fn lang_of(&self, unit: u32) -> Option<&LangId> {
        self.langs.iter().find(|(_, r)| r.contains(&unit)).map(|(l, _)| l)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LangId, &Range<u32>)> {
        self.langs.iter().map(|(l, r)| (l, r))
    }
}

impl fmt::Display for UnitLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .langs
            .iter()
            .map(|(l, r)| format!("{l}:{}:{}", r.start, r.end - r.start))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl std::str::FromStr for UnitLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut langs = Vec::new();
        for part in s.split(',') {
            let fields: Vec<&str> = part.split(':').collect();
            let parsed = match fields.as_slice() {
                [l, base, size] => base
                    .parse::<u32>()
                    .ok()
                    .zip(size.parse::<u32>().ok())
                    .map(|(b, n)| (l.to_string(), b..b + n)),
                _ => None,
            };
            let (l, r) = parsed.ok_or_else(|| Error::Config(format!("bad layout entry {part:?}")))?;
            langs.push((LangId::new(l)?, r));
        }
        Self::new(langs)
    }
}

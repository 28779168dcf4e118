//! Translation between synthetic discrete-unit languages through a fixed-size,
//! language-agnostic sentence embedding, trained on monolingual data only.
//!
//! The pipeline: [`synthlang`] generates corpora, [`encoder`] learns a pooled
//! sentence embedding shared across languages, [`translator`] learns to
//! regenerate unit sequences from that embedding, and [`evalkit`] scores the
//! results. Everything runs on the small autodiff core in [`numerics`].

pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod layers;
pub mod numerics;
pub mod seeding;
pub mod synthlang;
pub mod training;
pub mod translator;

pub use encoder::SentenceEmbedding;
pub use error::{Error, Result};
pub use numerics::Tensor;
pub use synthlang::{ConceptSentence, LangId, UnitSequence};

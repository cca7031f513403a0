//! Probing what a language model knows about knowledge-graph facts, and
//! measuring how fine-tuning on unknown facts moves that knowledge around.
//!
//! The crate is organized as a pipeline of stages, each a module:
//!
//! - [`kg`]: N-Triples ingestion, entity density and relation metadata.
//! - [`qa`]: question/answer facts built from triples or imported.
//! - [`probe`]: few-shot prompt sets and a resumable chat-completions client.
//! - [`scoring`]: answer matching, refusal detection and knowledge categories.
//! - [`mixture`]: fine-tuning mixtures and the training JSONL handoff.
//! - [`shift`]: category shifts, answer statistics and shift attribution.
//! - [`report`] and [`pipeline`]: seed aggregation, manifests and stage orchestration.
//!
//! [`mock`] provides a deterministic model used by tests and offline runs.

pub mod error;
pub mod io;
pub mod kg;
pub mod mixture;
pub mod mock;
pub mod pipeline;
pub mod probe;
pub mod qa;
pub mod report;
pub mod scoring;
pub mod shift;
pub mod text;

pub use error::{Diagnostic, Error, Parsed, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/facts.md")]
    mod facts {}
    #[doc = include_str!("../../../book/src/categories.md")]
    mod categories {}
    #[doc = include_str!("../../../book/src/mixtures.md")]
    mod mixtures {}
    #[doc = include_str!("../../../book/src/shifts.md")]
    mod shifts {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}

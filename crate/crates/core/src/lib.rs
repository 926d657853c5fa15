//! Retrieval-augmented reasoning engine.
//!
//! A model reasons inside `<think>`, asks for documents with `<search>`,
//! receives them in `<information>`, and finishes with `<answer>`. This crate
//! runs that loop against a BM25 passage index (or any remote retriever) and
//! a scripted or HTTP chat model, and turns the resulting traces into
//! exact-match rewards, loss masks, SFT samples and benchmark reports.
//!
//! Module map:
//! - [`corpus`]: documents to titled fixed-size passages, persisted with a checksum.
//! - [`retriever`]: BM25 index, batch search, remote retrieval protocol.
//! - [`protocol`]: prompts, tag grammar, query splitting, information blocks.
//! - [`llm`]: generation backends.
//! - [`rollout`]: the episode loop and traces.
//! - [`supervision`]: reward, masks, SFT segmentation, RL data selection.
//! - [`evaluation`]: benchmark reports and mode comparison.
//! - [`api`]: JSON bodies of the HTTP service.

pub mod api;
pub mod corpus;
pub mod evaluation;
pub mod llm;
pub mod protocol;
pub mod retriever;
pub mod rollout;
pub mod supervision;

pub use corpus::{Passage, PassageStore, RawDocument};
pub use evaluation::{EvalReport, PairedReport, QaExample};
pub use llm::{LanguageModel, ModelProvider, ScriptBook, ScriptedModel};
pub use protocol::{QueryMode, Segment, SegmentKind};
pub use retriever::{Bm25Retriever, Index, Retriever, SearchHit};
pub use rollout::{RolloutConfig, RolloutEngine, RolloutTrace, Termination};

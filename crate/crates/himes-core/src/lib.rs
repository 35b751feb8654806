//! Memory-augmented retrieval middleware for conversational assistants.
//!
//! The crate combines a short-term memory stage (dialogue-history query
//! rewriting), a partitioned long-term memory store over users' historical
//! queries, an attention-inspired chunk reranker, a reward engine for
//! rewriter post-training, a multi-agent dialogue dataset generator, and an
//! evaluation harness. All LLM and embedder dependencies sit behind client
//! traits so the whole system runs hermetically on deterministic stubs.

pub mod clients;
pub mod datagen;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod kb;
pub mod pipeline;
pub mod prompts;
pub mod rerank;
pub mod reward;
pub mod store;
pub mod taxonomy;
pub mod text;

pub use error::{Error, Result};

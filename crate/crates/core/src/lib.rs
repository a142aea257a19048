//! Zero-shot listwise reranking pipeline.
//!
//! The crate covers the full experimental loop around a prompt-decoder
//! reranker:
//!
//! - [`corpus`]: passage ingestion, an in-memory inverted index and BM25
//!   first-stage retrieval.
//! - [`prompt`]: the listwise and pairwise prompt templates, with passage
//!   sanitization and word-budget truncation.
//! - [`parse`]: strict parsing of `[i] > [j]` rankings, malformedness
//!   classification and repair into a total permutation.
//! - [`client`]: the model backends (an OpenAI-compatible chat endpoint and
//!   deterministic scripted oracles) plus an append-only response cache.
//! - [`window`]: back-to-front sliding-window reranking, single pass or
//!   progressive.
//! - [`prp`]: the pairwise PRP-Sliding baseline.
//! - [`eval`]: TREC run/qrels I/O, nDCG@k, MAP@k and multi-run aggregation.
//! - [`augment`]: distillation data generation with shuffle augmentation.
//! - [`experiment`]: end-to-end experiment orchestration and determinism
//!   verification.

pub mod augment;
pub mod client;
pub mod corpus;
pub mod eval;
pub mod experiment;
mod parallel;
pub mod parse;
pub mod prompt;
pub mod prp;
pub mod ranking;
pub mod window;

pub use corpus::{CorpusIndex, Passage, PassageSource, Query};
pub use parse::{parse_pairwise, parse_ranking, Classification, ParsedRanking, Preference};
pub use prompt::{PromptBuilder, PromptKind, PromptRequest};
pub use ranking::{RankedEntry, RankedList};

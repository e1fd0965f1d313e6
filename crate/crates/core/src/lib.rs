//! Late-interaction retrieval that ranks passages by MaxSim and, from the same
//! token embeddings, reports per-token relevance probabilities and evidence spans.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense row-major matrices with an instrumented operation counter.
//! - [`embedder`]: tokenizer, deterministic toy contextual embedder, embedding file I/O.
//! - [`index`]: corpus ingestion and the on-disk passage store.
//! - [`scoring`]: MaxSim ranking, the residual relevance head, span selection, search.
//! - [`trainer`]: joint distillation + token BCE objective with manual backprop.
//! - [`annotator`]: LLM span extraction and alignment to token targets.
//! - [`eval`]: plausibility (token F1), Recall@k, FLOP estimates and latency bench.

pub mod annotator;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod index;
pub mod io;
pub mod scoring;
pub mod tensor;
pub mod trainer;

pub use embedder::{embed, tokenize, EmbedderConfig, Encoder, Token, TokenizedText};
pub use error::{Error, FormatError, Result};
pub use index::{build_index, load_index, Index, IndexManifest, PassageRecord};
pub use scoring::{
    maxsim_score, search, select_spans, token_relevance, transform, HeadParams,
    RelevanceProfile, SearchHit, SearchOptions, Span, Threshold,
};
pub use tensor::{EmbeddingMatrix, Matrix, Matrix64, OpCounter};

//! Lossless speculative decoding where the draft model is the target model
//! itself, reading only a top-K subset of its visual KV cache.
//!
//! The crate contains a small deterministic decoder-only transformer
//! ([`ModelWeights`]) fed with a prompt of visual tokens followed by textual
//! tokens ([`TokenSequence`]). After prefill, the attention the textual
//! tokens paid to each visual token selects, per layer and KV head, the `K`
//! visual cache rows the draft keeps ([`build_selection`]). Decoding then
//! alternates a sparse draft of `gamma` tokens with a single dense
//! verification pass ([`generate`]); the output is token-for-token the dense
//! model's greedy output. [`CostModelInput`] models the memory traffic of the
//! scheme against plain decoding.
//!
//! ```
//! use sparse_to_dense::{build_model, generate, generate_dense, DecodeParams, ModelConfig, TokenSequence};
//!
//! let config = ModelConfig::new(2, 32, 4, 2, 64, 128, 7)?;
//! let weights = build_model(&config)?;
//! let input = TokenSequence::new((0..48).map(|i| i % 64).collect(), vec![1, 2, 3, 4])?;
//!
//! let out = generate(&weights, &input, DecodeParams::new(12, 4, 16))?;
//! assert_eq!(out.tokens, generate_dense(&weights, &input, 16, None)?);
//! # Ok::<(), sparse_to_dense::Error>(())
//! ```

pub mod cache;
pub mod config;
pub mod cost;
pub mod engine;
pub mod error;
pub mod model;
pub mod selection;
pub mod weights;
pub mod workload;

pub use cache::KvCache;
pub use config::{ModelConfig, TokenId, TokenSequence};
pub use cost::{CostModelInput, CostReport, EffectiveIo};
pub use engine::{
    acceptance_profile_from_prefill, draft, generate, generate_dense, generate_dense_from_prefill,
    generate_from_prefill, measure_agreement, measure_agreement_from_prefill, rollback, verify, AcceptanceProfile,
    Agreement, DecodeParams, DecodeRound, DecodeStats, Draft, Generation, Session, TraceRecord, Verification,
};
pub use error::{Error, Result};
pub use model::{argmax, AttentionRecord, Prefill};
pub use selection::{build_selection, score_visual_tokens, select_top_k, SelectionEntry, SparseSelection};
pub use weights::{build_model, ModelWeights};
pub use workload::{VisualStructure, WorkloadSpec};

/// Default K for a prompt: the retained visual rows plus the textual rows
/// total 1024 when the video is long enough, otherwise half the video.
pub fn default_k(m_v: usize, m_t: usize) -> usize {
    match 1024usize.checked_sub(m_t) {
        Some(k) if k < m_v => k,
        _ => m_v / 2,
    }
}

/// Default draft length.
pub const DEFAULT_GAMMA: usize = 9;

// Runs the guide's code listings as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/cost-model.md")]
    mod cost_model {}
}

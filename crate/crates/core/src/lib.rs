//! Spatiotemporal token compression for long-video features.
//!
//! A video arrives as per-frame grids of feature tokens. Three stages cut it
//! down to a fixed context budget:
//!
//! 1. [`temporal`] drops frames that are near-duplicates of their window.
//! 2. [`queryselect`] keeps the frames most relevant to a text query at full
//!    resolution and pools the rest.
//! 3. [`stc`] prunes pooled tokens that repeat the window anchor at the same
//!    grid position.
//!
//! [`pipeline::compress`] runs them in order and guarantees the budget.

pub mod cli;
pub mod error;
pub mod fpe;
pub mod numerics;
pub mod pipeline;
pub mod queryselect;
pub mod stc;
pub mod synthbench;
pub mod temporal;

pub use error::{Error, Result};
pub use fpe::{apply_fpe, fpe_vector, FpeConfig};
pub use numerics::{
    adaptive_avg_pool, apply_adapter, cosine_similarity, frame_summary, AdapterSpec, FeatureVector,
    TokenGrid,
};
pub use pipeline::{
    compress, enforce_budget, flatten, CompressedToken, CompressedTokenSequence, CompressionConfig,
    CompressionStats, StageToggles,
};
pub use queryselect::{
    compute_nh, frame_query_scores, select_and_pool, BudgetPlan, MixedResolutionSequence,
    QueryEmbedding, ResolutionLevel, SelectionParams,
};
pub use stc::{
    select_anchor, stc_pass, stc_prune_window, AnchorStrategy, FrameMeta, PrunedFrame, StcResult,
};
pub use temporal::{
    partition_windows, temporal_reduce, window_avg_similarity, FrameFeatureSequence,
    TemporalReductionResult,
};

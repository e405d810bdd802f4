//! Stage-adaptive token selection for omni-modal LLM prefill.
//!
//! The engine prunes interleaved visual/audio token streams in three stages:
//! per-window attention-weighted diversity selection before the LLM
//! ([`divprune`]), query-guided budget allocation and top-k retention at the
//! drop layers of a block-wise retention schedule ([`schedule`],
//! [`relevance`], [`allocator`], [`selector`]), and removal of every
//! remaining non-text token at the late block. [`pipeline`] runs the three
//! stages over a mock prefill and [`cost`] turns the resulting trace into an
//! analytic FLOPs estimate.

// negated comparisons reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod allocator;
pub mod cli;
pub mod cost;
pub mod divprune;
mod error;
pub mod io;
pub mod pipeline;
pub mod relevance;
pub mod schedule;
pub mod selector;
pub mod synth;
pub mod tokens;

pub use allocator::{allocate, BudgetPlan};
pub use cost::{layer_flops, trace_flops, CostReport};
pub use divprune::{greedy_maxmin, win_div_prune, SelectionResult};
pub use error::{Error, Result};
pub use pipeline::{mean_retention, run_pipeline, AttentionSource, PrefillTrace};
pub use relevance::{query_scores, window_relevance, RelevanceScores, SaliencyVector};
pub use schedule::{build_schedule, delta_oracle, solve_delta, SchedulePlan};
pub use selector::{apply_budget, late_removal, select_topk, LayerSelection};
pub use synth::{synth_generate, SynthOracle, SynthSpec};
pub use tokens::{
    audio_intact_rv, overall_ratio, validate_stream, Boundaries, Modality, ModelConfig,
    RetentionSpec, TokenStream, WindowLayout,
};

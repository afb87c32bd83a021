//! Block-sparse transformer prefill.
//!
//! Queries are split into segments and the KV cache into blocks. A cheap
//! segment × block criticality estimate ([`criticality`]) decides which cache
//! blocks each query segment attends to ([`pruned`]), and the estimate of
//! each layer is blended with the previous layer's ([`pipeline`]).
//! [`attention`] holds the exact dense path that everything is checked
//! against, and [`harness`] drives verification and benchmarks.

pub mod attention;
pub mod criticality;
pub mod error;
pub mod flops;
pub mod harness;
pub mod matrix;
pub mod model_io;
pub mod pipeline;
pub mod pruned;
pub mod reference;
pub mod rng;
pub mod tiling;

pub use attention::{dense_causal_attention, project, softmax_rows, AttentionOutput, Mask, Projections};
pub use criticality::{
    estimate_criticality, exact_critical_set, locality_matrix, locality_overlap, segment_representatives,
    CriticalSet, CriticalityMatrix, Horizon, LocalityGrid, SegmentRepresentatives,
};
pub use error::{Error, Result};
pub use flops::{count_flops, FlopReport};
pub use matrix::{Element, ElementWidth, HeadGeometry, HeadView, Matrix};
pub use model_io::{load_model, save_model};
pub use pipeline::{gen_synthetic_model, prefill, ModelBundle, Mode, PrefillOptions, PrefillResult};
pub use pruned::{dense_fallback_policy, pruned_attention, select_blocks, BlockSelection, PrunedAttnConfig};
pub use rng::{RngSpec, SplitMix64};
pub use tiling::Tiling;

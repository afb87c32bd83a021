//! Analytic FLOP accounting for dense and block-sparse prefill.
//!
//! A multiply-add counts as two FLOPs. Attention work is `QKᵀ` plus `AV` over
//! the (query, key) pairs actually scored, so one pair costs `4·d`. Softmax
//! and projections are not counted; they are identical in both modes.
//!
//! The pruned count assumes diagonal blocks are force-included, which makes
//! the number of scored pairs independent of the criticality scores.

use serde::Serialize;

use crate::matrix::HeadGeometry;
use crate::pipeline::Mode;
use crate::pruned::{dense_fallback_policy, PrunedAttnConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub dense: u64,
    pub pruned: u64,
    pub overhead: u64,
    /// Whether this layer ran (or would run) the block-sparse path.
    pub sparse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub mode: Mode,
    pub n: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// Dense causal attention cost.
    pub dense: u64,
    /// Attention cost of the executed path (equals `dense` when unpruned).
    pub pruned: u64,
    /// Criticality estimation cost.
    pub overhead: u64,
    /// `dense / (pruned + overhead)`.
    pub ratio: f64,
    pub per_layer: Vec<LayerFlops>,
}

impl FlopReport {
    pub fn from_layers(mode: Mode, n: usize, geometry: HeadGeometry, per_layer: Vec<LayerFlops>) -> Self {
        let dense = per_layer.iter().map(|l| l.dense).sum();
        let pruned = per_layer.iter().map(|l| l.pruned).sum();
        let overhead = per_layer.iter().map(|l| l.overhead).sum();
        let spent: u64 = pruned + overhead;
        Self {
            mode,
            n,
            n_heads: geometry.n_heads,
            head_dim: geometry.head_dim,
            dense,
            pruned,
            overhead,
            ratio: if spent == 0 { 1.0 } else { dense as f64 / spent as f64 },
            per_layer,
        }
    }
}

/// Causal (query, key) pairs of dense attention: `n(n+1)/2`.
pub fn dense_pairs(n: usize) -> u64 {
    let n = n as u64;
    n * (n + 1) / 2
}

/// (query, key) pairs scored by block-sparse attention over all segments.
pub fn pruned_pairs(n: usize, cfg: &PrunedAttnConfig) -> u64 {
    let Ok(tiling) = cfg.tiling(n) else {
        return 0;
    };
    let bs = cfg.block_size as u64;
    (0..tiling.n_segments())
        .map(|s| {
            let seg = tiling.segment_range(s);
            let m = seg.len() as u64;
            let diag = tiling.diagonal_blocks(s);
            let target = cfg.budget_blocks().min(tiling.eligible_blocks(s).len()).max(diag.len());
            let off_diag = (target - diag.len()) as u64;
            // query i sees every diagonal token from the first diagonal block's start up to i
            let lead = (seg.start - diag.start * cfg.block_size) as u64;
            off_diag * bs * m + m * (lead + 1) + m * (m - 1) / 2
        })
        .sum()
}

/// Estimation cost for one head: extrema reductions `2·n·d`, four
/// representative score products `4·(2·d·n1·n2)` and combination plus
/// fusion `5·n1·n2`.
pub fn estimation_overhead(n: usize, head_dim: usize, cfg: &PrunedAttnConfig) -> u64 {
    let Ok(tiling) = cfg.tiling(n) else {
        return 0;
    };
    let (n, d) = (n as u64, head_dim as u64);
    let (n1, n2) = (tiling.n_segments() as u64, tiling.n_blocks() as u64);
    2 * n * d + 4 * (2 * d * n1 * n2) + 5 * n1 * n2
}

/// Cost of one layer across all heads.
pub fn layer_flops(n: usize, geometry: HeadGeometry, cfg: &PrunedAttnConfig, sparse: bool) -> LayerFlops {
    let h = geometry.n_heads as u64;
    let d = geometry.head_dim as u64;
    let dense = h * 4 * d * dense_pairs(n);
    if !sparse {
        return LayerFlops {
            dense,
            pruned: dense,
            overhead: 0,
            sparse,
        };
    }
    LayerFlops {
        dense,
        pruned: h * 4 * d * pruned_pairs(n, cfg),
        overhead: h * estimation_overhead(n, geometry.head_dim, cfg),
        sparse,
    }
}

/// Whole-model tally. In pruned mode, sequences covered by the dense fallback
/// are counted as dense.
pub fn count_flops(n: usize, layers: usize, geometry: HeadGeometry, cfg: &PrunedAttnConfig, mode: Mode) -> FlopReport {
    let sparse = mode == Mode::Pruned && !dense_fallback_policy(n, cfg);
    let per_layer = (0..layers).map(|_| layer_flops(n, geometry, cfg, sparse)).collect();
    FlopReport::from_layers(mode, n, geometry, per_layer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(h: usize, d: usize) -> HeadGeometry {
        HeadGeometry::new(h, d).unwrap()
    }

    #[test]
    fn two_tokens_one_dim_dense() {
        let r = count_flops(2, 1, geom(1, 1), &PrunedAttnConfig::default(), Mode::Dense);
        assert_eq!(r.dense, 12);
        assert_eq!(r.pruned, 12);
        assert_eq!(r.overhead, 0);
        assert_eq!(r.ratio, 1.0);
    }

    #[test]
    fn single_diagonal_block_equals_dense_term() {
        let cfg = PrunedAttnConfig {
            segment_size: 64,
            block_size: 64,
            budget: 64,
            ..Default::default()
        };
        let l = layer_flops(64, geom(2, 8), &cfg, true);
        assert_eq!(l.pruned, l.dense);
        assert_eq!(pruned_pairs(64, &cfg), dense_pairs(64));
    }

    #[test]
    fn full_budget_pairs_equal_dense() {
        for n in [1, 7, 100, 333] {
            let cfg = PrunedAttnConfig {
                segment_size: 16,
                block_size: 5,
                budget: 400,
                ..Default::default()
            };
            assert_eq!(pruned_pairs(n, &cfg), dense_pairs(n));
        }
    }

    #[test]
    fn fallback_counts_as_dense() {
        let r = count_flops(1024, 2, geom(4, 16), &PrunedAttnConfig::default(), Mode::Pruned);
        assert_eq!(r.pruned, r.dense);
        assert!(r.per_layer.iter().all(|l| !l.sparse));
    }

    #[test]
    fn ratio_grows_with_length_at_default_config() {
        let cfg = PrunedAttnConfig::default();
        let ratios: Vec<f64> = [4096, 8192, 16384]
            .iter()
            .map(|&n| count_flops(n, 1, geom(1, 64), &cfg, Mode::Pruned).ratio)
            .collect();
        assert!(ratios[0] > 1.0);
        assert!(ratios.windows(2).all(|w| w[1] > w[0]), "{ratios:?}");
    }
}

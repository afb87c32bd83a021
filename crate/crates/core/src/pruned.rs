//! Budgeted block-sparse causal attention.
//!
//! Each query segment attends only to the cache blocks picked for it from its
//! criticality row. Blocks overlapping the segment itself are always kept and
//! token-level causal masking is applied inside them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_row, AttentionOutput, Packed};
use crate::criticality::CriticalityMatrix;
use crate::error::{Error, Result};
use crate::matrix::{Element, HeadView, Matrix};
use crate::tiling::Tiling;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrunedAttnConfig {
    /// Query tokens per segment.
    pub segment_size: usize,
    /// Cache tokens per block.
    pub block_size: usize,
    /// Cache tokens each segment may attend to.
    pub budget: usize,
    /// Weight of the current layer in score fusion.
    pub alpha: f64,
    /// Scale representative logits by `1/√d` in the estimator.
    pub scale_logits: bool,
    /// Always keep blocks overlapping the query segment.
    pub force_diagonal: bool,
    /// Token-level causal mask inside gathered blocks. Only the harness
    /// self-test turns this off.
    #[serde(default = "default_true")]
    pub causal_mask: bool,
}

fn default_true() -> bool {
    true
}

impl Default for PrunedAttnConfig {
    fn default() -> Self {
        Self {
            segment_size: 512,
            block_size: 32,
            budget: 1024,
            alpha: 0.25,
            scale_logits: false,
            force_diagonal: true,
            causal_mask: true,
        }
    }
}

impl PrunedAttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment_size == 0 || self.block_size == 0 {
            return Err(Error::config("segment_size and block_size must be at least 1"));
        }
        if self.budget < self.block_size {
            return Err(Error::config(format!(
                "budget {} is smaller than block_size {}",
                self.budget, self.block_size
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }

    /// `⌊budget / block_size⌋`, at least one.
    pub fn budget_blocks(&self) -> usize {
        (self.budget / self.block_size).max(1)
    }

    pub fn tiling(&self, n: usize) -> Result<Tiling> {
        Tiling::new(n, self.segment_size, self.block_size)
    }
}

/// Cache blocks chosen for one query segment, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockSelection {
    pub segment: usize,
    pub blocks: Vec<usize>,
    pub budget_blocks: usize,
}

impl BlockSelection {
    /// Token positions covered by the selection, ascending.
    pub fn positions(&self, tiling: &Tiling) -> Vec<usize> {
        self.blocks.iter().flat_map(|&b| tiling.block_range(b)).collect()
    }
}

/// True when pruning cannot remove anything useful and dense attention should run.
pub fn dense_fallback_policy(n: usize, cfg: &PrunedAttnConfig) -> bool {
    n <= cfg.budget || n <= cfg.segment_size
}

/// Picks blocks for `segment` from its score row.
///
/// Diagonal blocks come first (when forced), then the best-scoring remaining
/// eligible blocks until `min(budget_blocks, eligible)` is reached. If the
/// diagonal alone exceeds the budget it is still kept whole.
pub fn select_blocks<T: Element>(
    scores: &[T],
    segment: usize,
    tiling: &Tiling,
    cfg: &PrunedAttnConfig,
) -> BlockSelection {
    assert_eq!(scores.len(), tiling.n_blocks(), "score row length");
    let budget_blocks = cfg.budget_blocks();
    let eligible = tiling.eligible_blocks(segment);
    let forced = if cfg.force_diagonal {
        tiling.diagonal_blocks(segment)
    } else {
        0..0
    };
    let target = budget_blocks.min(eligible.len()).max(forced.len());

    let mut rest: Vec<usize> = eligible.filter(|b| !forced.contains(b)).collect();
    rest.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    rest.truncate(target - forced.len());

    let mut blocks: Vec<usize> = forced.chain(rest).collect();
    blocks.sort_unstable();
    BlockSelection {
        segment,
        blocks,
        budget_blocks,
    }
}

/// Selections for every segment of a score matrix.
pub fn select_all<T: Element>(scores: &CriticalityMatrix<T>, cfg: &PrunedAttnConfig) -> Vec<BlockSelection> {
    let tiling = scores.tiling();
    (0..scores.n_segments())
        .map(|s| select_blocks(scores.row(s), s, &tiling, cfg))
        .collect()
}

/// Block-sparse attention driven by `scores`.
pub fn pruned_attention<T: Element>(
    q: HeadView<'_, T>,
    k: HeadView<'_, T>,
    v: HeadView<'_, T>,
    scores: &CriticalityMatrix<T>,
    cfg: &PrunedAttnConfig,
    retain_weights: bool,
) -> Result<AttentionOutput<T>> {
    cfg.validate()?;
    let tiling = scores.tiling();
    if tiling != cfg.tiling(q.rows())? {
        return Err(Error::config("score tiling does not match the inputs and config"));
    }
    let selections = select_all(scores, cfg);
    attend_selected(q, k, v, &tiling, &selections, cfg, retain_weights)
}

struct SegmentResult<T> {
    rows: Vec<T>,
    /// Per query row: gathered positions and their weights.
    weights: Option<Vec<(usize, Vec<T>)>>,
    pairs: u64,
}

/// Attention over precomputed selections, one per segment.
pub fn attend_selected<T: Element>(
    q: HeadView<'_, T>,
    k: HeadView<'_, T>,
    v: HeadView<'_, T>,
    tiling: &Tiling,
    selections: &[BlockSelection],
    cfg: &PrunedAttnConfig,
    retain_weights: bool,
) -> Result<AttentionOutput<T>> {
    let n = q.rows();
    if k.rows() != n || v.rows() != n || tiling.n != n {
        return Err(Error::config("q, k, v and tiling lengths differ"));
    }
    if q.dim() != k.dim() {
        return Err(Error::config("query and key head dims differ"));
    }
    if selections.len() != tiling.n_segments() {
        return Err(Error::config("one selection per segment required"));
    }
    let (d, dv) = (k.dim(), v.dim());
    let scale = T::one() / T::from_f64(d as f64).sqrt();

    let per_segment: Vec<SegmentResult<T>> = selections
        .par_iter()
        .enumerate()
        .map(|(s, sel)| {
            let rows = tiling.segment_range(s);
            if sel.blocks.is_empty() {
                return Err(Error::Internal(format!("segment {s} has no selected blocks")));
            }
            let positions = sel.positions(tiling);
            let mut k_hat = Vec::with_capacity(positions.len() * d);
            let mut v_hat = Vec::with_capacity(positions.len() * dv);
            for &t in &positions {
                k_hat.extend_from_slice(k.row(t));
                v_hat.extend_from_slice(v.row(t));
            }
            let keys = Packed { data: &k_hat, dim: d };
            let values = Packed { data: &v_hat, dim: dv };

            let mut out = vec![T::zero(); rows.len() * dv];
            let mut weights = retain_weights.then(Vec::new);
            let mut probs = Vec::with_capacity(positions.len());
            let mut pairs = 0u64;
            for (local, i) in rows.enumerate() {
                let visible = if cfg.causal_mask {
                    positions.partition_point(|&t| t <= i)
                } else {
                    positions.len()
                };
                if visible == 0 {
                    return Err(Error::FullyMasked { row: i });
                }
                attend_row(
                    q.row(i),
                    &keys,
                    &values,
                    visible,
                    scale,
                    &mut probs,
                    &mut out[local * dv..(local + 1) * dv],
                );
                pairs += visible as u64;
                if let Some(w) = weights.as_mut() {
                    w.push((i, probs.clone()));
                }
            }
            Ok(SegmentResult {
                rows: out,
                weights,
                pairs,
            })
        })
        .collect::<Result<_>>()?;

    let mut data = Vec::with_capacity(n * dv);
    let mut pairs = 0;
    let mut weights = retain_weights.then(|| Matrix::zeros(n, n));
    for (s, seg) in per_segment.into_iter().enumerate() {
        data.extend(seg.rows);
        pairs += seg.pairs;
        if let (Some(w), Some(rows)) = (weights.as_mut(), seg.weights) {
            let positions = selections[s].positions(tiling);
            for (i, probs) in rows {
                for (&t, p) in positions.iter().zip(probs) {
                    w.set(i, t, p);
                }
            }
        }
    }
    Ok(AttentionOutput {
        output: Matrix::from_vec(n, dv, data)?,
        weights,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::dense_causal_attention;
    use crate::criticality::{estimate_criticality, segment_representatives};
    use crate::reference;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn cfg(segment_size: usize, block_size: usize, budget: usize) -> PrunedAttnConfig {
        PrunedAttnConfig {
            segment_size,
            block_size,
            budget,
            ..Default::default()
        }
    }

    #[test]
    fn defaults() {
        let c = PrunedAttnConfig::default();
        assert_eq!((c.segment_size, c.block_size, c.budget, c.alpha), (512, 32, 1024, 0.25));
        assert_eq!(c.budget_blocks(), 32);
        assert!(cfg(4, 8, 4).validate().is_err());
    }

    #[test]
    fn budget_covering_eligible_takes_all() {
        let t = Tiling::new(64, 16, 8).unwrap();
        let sel = select_blocks(&[0.3f64; 8], 1, &t, &cfg(16, 8, 128));
        assert_eq!(sel.blocks, vec![0, 1, 2, 3]);
    }

    #[test]
    fn top_two_by_score() {
        let t = Tiling::new(4, 1, 1).unwrap();
        let sel = select_blocks(&[0.1f64, 0.5, 0.2, 0.4], 3, &t, &cfg(1, 1, 2));
        assert_eq!(sel.blocks, vec![1, 3]);
        let no_diag = PrunedAttnConfig {
            force_diagonal: false,
            ..cfg(1, 1, 2)
        };
        assert_eq!(select_blocks(&[0.1f64, 0.5, 0.2, 0.4], 3, &t, &no_diag).blocks, vec![1, 3]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let t = Tiling::new(4, 1, 1).unwrap();
        let no_diag = PrunedAttnConfig {
            force_diagonal: false,
            ..cfg(1, 1, 2)
        };
        assert_eq!(select_blocks(&[0.25f64; 4], 3, &t, &no_diag).blocks, vec![0, 1]);
        // with the diagonal forced, block 3 takes one of the two slots
        assert_eq!(select_blocks(&[0.25f64; 4], 3, &t, &cfg(1, 1, 2)).blocks, vec![0, 3]);
    }

    #[test]
    fn diagonal_kept_even_beyond_budget() {
        let t = Tiling::new(128, 64, 8).unwrap();
        let sel = select_blocks(&[0.0f64; 16], 1, &t, &cfg(64, 8, 16));
        assert_eq!(sel.blocks, (8..16).collect::<Vec<_>>());
    }

    #[test]
    fn fallback_policy() {
        let c = PrunedAttnConfig::default();
        assert!(dense_fallback_policy(1024, &c));
        assert!(!dense_fallback_policy(4096, &c));
        assert!(dense_fallback_policy(300, &c));
    }

    fn random_qkv(seed: u64, n: usize, d: usize) -> (Matrix<f32>, Matrix<f32>, Matrix<f32>) {
        let mut g = SplitMix64::new(seed);
        (g.normal_matrix(n, d, 1.0), g.normal_matrix(n, d, 1.0), g.normal_matrix(n, d, 1.0))
    }

    fn scores_for(q: &Matrix<f32>, k: &Matrix<f32>, c: &PrunedAttnConfig) -> CriticalityMatrix<f32> {
        let reps = segment_representatives(q.view(), c.segment_size, k.view(), c.block_size).unwrap();
        estimate_criticality(&reps, None, 1.0, c.scale_logits).unwrap()
    }

    #[test]
    fn single_segment_single_block_is_dense() {
        let (q, k, v) = random_qkv(1, 16, 4);
        let c = cfg(16, 16, 16);
        let s = scores_for(&q, &k, &c);
        let sparse = pruned_attention(q.view(), k.view(), v.view(), &s, &c, false).unwrap();
        let dense = dense_causal_attention(q.view(), k.view(), v.view(), 0.5, false).unwrap();
        assert_eq!(sparse.output, dense.output);
    }

    #[test]
    fn full_budget_matches_dense() {
        let (q, k, v) = random_qkv(2, 200, 8);
        let c = cfg(32, 8, 256);
        let s = scores_for(&q, &k, &c);
        let sparse = pruned_attention(q.view(), k.view(), v.view(), &s, &c, true).unwrap();
        let dense = dense_causal_attention(q.view(), k.view(), v.view(), 1.0 / 8f32.sqrt(), true).unwrap();
        assert!(sparse.output.max_abs_diff(&dense.output).unwrap() <= 1e-5);
        assert_eq!(sparse.pairs, dense.pairs);
    }

    #[test]
    fn matches_gather_oracle() {
        let (q, k, v) = random_qkv(3, 512, 8);
        let c = cfg(64, 16, 128);
        let s = scores_for(&q, &k, &c);
        let out = pruned_attention(q.view(), k.view(), v.view(), &s, &c, true).unwrap();
        let sel: Vec<Vec<usize>> = select_all(&s, &c).into_iter().map(|s| s.blocks).collect();
        let want = reference::gathered_attention(&q.cast(), &k.cast(), &v.cast(), 64, 16, &sel, 1.0 / 8f64.sqrt());
        assert!(out.output.cast::<f64>().max_abs_diff(&want).unwrap() < 1e-5);

        let w = out.weights.unwrap();
        for i in 0..512 {
            let sum: f32 = w.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
            assert!(w.row(i)[i + 1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn unmasked_fault_leaks_future_tokens() {
        let (q, k, v) = random_qkv(4, 64, 4);
        let c = PrunedAttnConfig {
            causal_mask: false,
            ..cfg(16, 8, 16)
        };
        let s = scores_for(&q, &k, &c);
        let out = pruned_attention(q.view(), k.view(), v.view(), &s, &c, true).unwrap();
        assert!(out.weights.unwrap().get(0, 1) > 0.0);
    }

    #[test]
    fn mismatched_tiling_rejected() {
        let (q, k, v) = random_qkv(5, 64, 4);
        let s = scores_for(&q, &k, &cfg(16, 8, 16));
        assert!(pruned_attention(q.view(), k.view(), v.view(), &s, &cfg(32, 8, 16), false).is_err());
    }

    proptest! {
        #[test]
        fn selection_invariants(
            seed in any::<u64>(), n in 1usize..300, seg in 1usize..40, blk in 1usize..20, extra in 0usize..100,
        ) {
            let c = cfg(seg, blk, blk + extra);
            let t = c.tiling(n).unwrap();
            let mut g = SplitMix64::new(seed);
            let row: Vec<f64> = (0..t.n_blocks()).map(|_| g.next_uniform()).collect();
            for s in 0..t.n_segments() {
                let sel = select_blocks(&row, s, &t, &c);
                let eligible = t.eligible_blocks(s);
                let diag = t.diagonal_blocks(s);
                prop_assert_eq!(sel.blocks.len(), c.budget_blocks().min(eligible.len()).max(diag.len()));
                prop_assert!(sel.blocks.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(sel.blocks.iter().all(|&b| t.is_visible(s, b)));
                prop_assert!(diag.clone().all(|b| sel.blocks.contains(&b)));
                prop_assert_eq!(&sel, &select_blocks(&row, s, &t, &c));
                // a larger budget only adds blocks
                let bigger = select_blocks(&row, s, &t, &PrunedAttnConfig { budget: c.budget + blk, ..c });
                prop_assert!(sel.blocks.iter().all(|b| bigger.blocks.contains(b)));
            }
        }
    }
}

//! Segment-wise query-criticality estimation, exact token-wise critical sets
//! and the locality-overlap analyzer.
//!
//! The estimator reduces each query segment and each cache block to an
//! elementwise max and min vector, scores all four representative pairings
//! with a row softmax over blocks, keeps the larger of the max-key and
//! min-key averages, zeroes causally invisible blocks and optionally blends
//! with the previous layer's scores.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::attention::softmax_slice;
use crate::error::{Error, Result};
use crate::matrix::{dot, Element, HeadView, Matrix};
use crate::tiling::Tiling;

/// Elementwise extrema of every query segment and key block.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRepresentatives<T> {
    pub q_max: Matrix<T>,
    pub q_min: Matrix<T>,
    pub k_max: Matrix<T>,
    pub k_min: Matrix<T>,
    pub tiling: Tiling,
}

/// Segment × block scores for one head of one layer. Entries lie in `[0, 1]`
/// and causally invisible pairs are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalityMatrix<T> {
    scores: Matrix<T>,
    tiling: Tiling,
}

impl<T: Element> CriticalityMatrix<T> {
    /// Wraps precomputed scores after checking shape, range and mask.
    pub fn new(scores: Matrix<T>, tiling: Tiling) -> Result<Self> {
        if scores.shape() != (tiling.n_segments(), tiling.n_blocks()) {
            return Err(Error::config(format!(
                "score matrix is {}x{}, tiling needs {}x{}",
                scores.rows(),
                scores.cols(),
                tiling.n_segments(),
                tiling.n_blocks()
            )));
        }
        for s in 0..scores.rows() {
            for (b, &x) in scores.row(s).iter().enumerate() {
                if x < T::zero() || x > T::one() {
                    return Err(Error::InvalidArgument(format!("score ({s},{b}) outside [0,1]")));
                }
                if !tiling.is_visible(s, b) && x != T::zero() {
                    return Err(Error::InvalidArgument(format!("masked score ({s},{b}) is nonzero")));
                }
            }
        }
        Ok(Self { scores, tiling })
    }

    pub fn scores(&self) -> &Matrix<T> {
        &self.scores
    }

    pub fn tiling(&self) -> Tiling {
        self.tiling
    }

    pub fn n_segments(&self) -> usize {
        self.scores.rows()
    }

    pub fn n_blocks(&self) -> usize {
        self.scores.cols()
    }

    pub fn row(&self, segment: usize) -> &[T] {
        self.scores.row(segment)
    }

    pub fn get(&self, segment: usize, block: usize) -> T {
        self.scores.get(segment, block)
    }
}

pub fn segment_representatives<T: Element>(
    q: HeadView<'_, T>,
    segment_size: usize,
    k: HeadView<'_, T>,
    block_size: usize,
) -> Result<SegmentRepresentatives<T>> {
    if q.rows() == 0 || k.rows() == 0 {
        return Err(Error::EmptyInput("no tokens to reduce"));
    }
    if q.rows() != k.rows() {
        return Err(Error::config("query and key lengths differ"));
    }
    if q.dim() != k.dim() {
        return Err(Error::config("query and key head dims differ"));
    }
    let tiling = Tiling::new(q.rows(), segment_size, block_size)?;
    let (q_max, q_min) = reduce_extrema(&q, tiling.n_segments(), |s| tiling.segment_range(s));
    let (k_max, k_min) = reduce_extrema(&k, tiling.n_blocks(), |b| tiling.block_range(b));
    Ok(SegmentRepresentatives {
        q_max,
        q_min,
        k_max,
        k_min,
        tiling,
    })
}

fn reduce_extrema<T: Element>(
    x: &HeadView<'_, T>,
    groups: usize,
    range: impl Fn(usize) -> std::ops::Range<usize>,
) -> (Matrix<T>, Matrix<T>) {
    let d = x.dim();
    let mut hi = Matrix::from_fn(groups, d, |_, _| T::neg_infinity());
    let mut lo = Matrix::from_fn(groups, d, |_, _| T::infinity());
    for g in 0..groups {
        for t in range(g) {
            let row = x.row(t);
            for (h, &v) in hi.row_mut(g).iter_mut().zip(row) {
                *h = h.max(v);
            }
            for (l, &v) in lo.row_mut(g).iter_mut().zip(row) {
                *l = l.min(v);
            }
        }
    }
    (hi, lo)
}

/// Row-softmaxed `a · bᵀ` over all blocks, unmasked.
fn representative_scores<T: Element>(a: &Matrix<T>, b: &Matrix<T>, scale: T) -> Matrix<T> {
    let mut out = Matrix::zeros(a.rows(), b.rows());
    let cols = b.rows();
    out.data_mut()
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(s, row)| {
            for (blk, x) in row.iter_mut().enumerate() {
                *x = scale * dot(a.row(s), b.row(blk));
            }
            softmax_slice(row);
        });
    out
}

/// Scores every (segment, block) pair and fuses with `prev` when given.
///
/// `alpha` weights the current layer; `prev` must share the tiling.
/// With `scale_logits` the representative logits are multiplied by `1/√d`.
pub fn estimate_criticality<T: Element>(
    reps: &SegmentRepresentatives<T>,
    prev: Option<&CriticalityMatrix<T>>,
    alpha: f64,
    scale_logits: bool,
) -> Result<CriticalityMatrix<T>> {
    let raw = raw_criticality(reps, scale_logits)?;
    match prev {
        Some(p) => fuse(&raw, p, alpha),
        None => {
            check_alpha(alpha)?;
            Ok(raw)
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Pre-fusion scores: combination of the four representative softmaxes with
/// the causal mask applied.
pub fn raw_criticality<T: Element>(
    reps: &SegmentRepresentatives<T>,
    scale_logits: bool,
) -> Result<CriticalityMatrix<T>> {
    let tiling = reps.tiling;
    let d = reps.q_max.cols();
    let scale = if scale_logits {
        T::one() / T::from_f64(d as f64).sqrt()
    } else {
        T::one()
    };
    let s1 = representative_scores(&reps.q_max, &reps.k_max, scale);
    let s2 = representative_scores(&reps.q_max, &reps.k_min, scale);
    let s3 = representative_scores(&reps.q_min, &reps.k_max, scale);
    let s4 = representative_scores(&reps.q_min, &reps.k_min, scale);

    let half = T::from_f64(0.5);
    let (n1, n2) = (tiling.n_segments(), tiling.n_blocks());
    let scores = Matrix::from_fn(n1, n2, |s, b| {
        if !tiling.is_visible(s, b) {
            return T::zero();
        }
        let with_max = (s1.get(s, b) + s3.get(s, b)) * half;
        let with_min = (s2.get(s, b) + s4.get(s, b)) * half;
        with_max.max(with_min)
    });
    Ok(CriticalityMatrix { scores, tiling })
}

/// `alpha · current + (1 − alpha) · prev`.
pub fn fuse<T: Element>(
    current: &CriticalityMatrix<T>,
    prev: &CriticalityMatrix<T>,
    alpha: f64,
) -> Result<CriticalityMatrix<T>> {
    check_alpha(alpha)?;
    if current.tiling != prev.tiling {
        return Err(Error::config("previous-layer scores use a different tiling"));
    }
    let a = T::from_f64(alpha);
    let rest = T::from_f64(1.0 - alpha);
    let data = current
        .scores
        .data()
        .iter()
        .zip(prev.scores.data())
        .map(|(&c, &p)| a * c + rest * p)
        .collect();
    Ok(CriticalityMatrix {
        scores: Matrix::from_vec(current.n_segments(), current.n_blocks(), data)?,
        tiling: current.tiling,
    })
}

/// Top-`k` key positions for one query, restricted to positions `<= position`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CriticalSet {
    pub position: usize,
    /// Ascending token indices.
    pub indices: Vec<usize>,
    pub k: usize,
}

/// Exact top-`k` keys by logit `q · K[j]` over `j <= position`. Ranking logits
/// is equivalent to ranking softmax weights. Ties go to the lower index.
pub fn exact_critical_set<T: Element>(
    query: &[T],
    position: usize,
    keys: HeadView<'_, T>,
    k: usize,
) -> Result<CriticalSet> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if position >= keys.rows() {
        return Err(Error::InvalidArgument(format!(
            "position {position} beyond {} keys",
            keys.rows()
        )));
    }
    if query.len() != keys.dim() {
        return Err(Error::config("query and key dims differ"));
    }
    let mut ranked: Vec<(T, usize)> = (0..=position).map(|j| (dot(query, keys.row(j)), j)).collect();
    let take = k.min(ranked.len());
    let order = |a: &(T, usize), b: &(T, usize)| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    };
    if take < ranked.len() {
        ranked.select_nth_unstable_by(take - 1, order);
        ranked.truncate(take);
    }
    let mut indices: Vec<usize> = ranked.into_iter().map(|(_, j)| j).collect();
    indices.sort_unstable();
    Ok(CriticalSet { position, indices, k })
}

/// `|a ∩ b| / k`.
pub fn locality_overlap(a: &CriticalSet, b: &CriticalSet) -> Result<f64> {
    if a.k != b.k {
        return Err(Error::InvalidArgument(format!("k differs: {} vs {}", a.k, b.k)));
    }
    let (mut i, mut j, mut shared) = (0, 0, 0usize);
    while i < a.indices.len() && j < b.indices.len() {
        match a.indices[i].cmp(&b.indices[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(shared as f64 / a.k as f64)
}

/// Candidate keys considered for each sampled query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Horizon {
    /// Keys at positions `<= i` only.
    Causal,
    /// Every key in the sequence.
    Full,
}

/// Pairwise overlap of critical sets over sampled query positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalityGrid {
    pub n: usize,
    pub k: usize,
    pub horizon: Horizon,
    /// Sampled query positions, ascending.
    pub positions: Vec<usize>,
    /// `positions.len()²` overlaps, row-major.
    pub overlaps: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalitySummary {
    pub adjacent_mean: f64,
    pub distant_mean: f64,
    pub gap: f64,
    pub adjacent_pairs: usize,
    pub distant_pairs: usize,
}

impl LocalityGrid {
    pub fn size(&self) -> usize {
        self.positions.len()
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.overlaps[a * self.size() + b]
    }

    /// Adjacent pairs are consecutive samples; distant pairs are at least
    /// `n / 2` tokens apart.
    pub fn summary(&self) -> LocalitySummary {
        let m = self.size();
        let adjacent: Vec<f64> = (1..m).map(|a| self.get(a - 1, a)).collect();
        let mut distant = Vec::new();
        for a in 0..m {
            for b in a + 1..m {
                if self.positions[b] - self.positions[a] >= self.n / 2 {
                    distant.push(self.get(a, b));
                }
            }
        }
        let mean = |xs: &[f64]| {
            if xs.is_empty() {
                f64::NAN
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        let (adjacent_mean, distant_mean) = (mean(&adjacent), mean(&distant));
        LocalitySummary {
            adjacent_mean,
            distant_mean,
            gap: adjacent_mean - distant_mean,
            adjacent_pairs: adjacent.len(),
            distant_pairs: distant.len(),
        }
    }

    /// RFC-4180 CSV with header `row,col,overlap`; row and col are query positions.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "row,col,overlap")?;
        for (a, &pa) in self.positions.iter().enumerate() {
            for (b, &pb) in self.positions.iter().enumerate() {
                writeln!(w, "{pa},{pb},{}", self.get(a, b))?;
            }
        }
        Ok(())
    }
}

/// Overlap grid over query positions `0, stride, 2·stride, …`.
pub fn locality_matrix<T: Element>(
    q: HeadView<'_, T>,
    k: HeadView<'_, T>,
    top_k: usize,
    stride: usize,
    horizon: Horizon,
) -> Result<LocalityGrid> {
    let n = q.rows();
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    if top_k > n {
        return Err(Error::InvalidArgument(format!("k = {top_k} exceeds n = {n}")));
    }
    if k.rows() != n {
        return Err(Error::config("query and key lengths differ"));
    }
    let positions: Vec<usize> = (0..n).step_by(stride).collect();
    let sets = positions
        .par_iter()
        .map(|&i| {
            let horizon_pos = match horizon {
                Horizon::Causal => i,
                Horizon::Full => n - 1,
            };
            exact_critical_set(q.row(i), horizon_pos, k, top_k)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = positions.len();
    let mut overlaps = vec![0.0; m * m];
    for a in 0..m {
        overlaps[a * m + a] = 1.0;
        for b in a + 1..m {
            let o = locality_overlap(&sets[a], &sets[b])?;
            overlaps[a * m + b] = o;
            overlaps[b * m + a] = o;
        }
    }
    Ok(LocalityGrid {
        n,
        k: top_k,
        horizon,
        positions,
        overlaps,
    })
}

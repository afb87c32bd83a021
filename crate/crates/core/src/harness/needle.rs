//! Synthetic planted-block retrieval.
//!
//! One key block is set to `c·u` while every other key is orthogonal to `u`,
//! and every query in the final segment equals `u`. The check is whether the
//! estimator picks the planted block for the final segment.

use serde::Serialize;

use crate::criticality::{raw_criticality, segment_representatives};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pruned::{select_blocks, PrunedAttnConfig};
use crate::rng::RngSpec;

#[derive(Debug, Clone)]
pub struct NeedleParams {
    pub seq_lens: Vec<usize>,
    /// Insertion depths as fractions of the sequence.
    pub depths: Vec<f64>,
    pub head_dim: usize,
    pub magnitude: f64,
    pub cfg: PrunedAttnConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NeedleCell {
    pub n: usize,
    pub depth: f64,
    pub planted_block: usize,
    pub selected: bool,
    pub rank: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct NeedleReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub seed: u64,
    pub magnitude: f64,
    pub head_dim: usize,
    pub config: PrunedAttnConfig,
    pub cells: Vec<NeedleCell>,
    pub found: usize,
    pub total: usize,
    pub all_found: bool,
}

/// Block index holding the token at `depth · n`.
pub fn planted_block(n: usize, depth: f64, block_size: usize) -> Result<usize> {
    let n2 = n.div_ceil(block_size);
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::InvalidArgument(format!("depth {depth} outside [0, 1]")));
    }
    let block = (depth * n as f64).floor() as usize / block_size;
    if block >= n2 {
        return Err(Error::InvalidArgument(format!("depth {depth} maps to block {block} beyond {n2} blocks")));
    }
    Ok(block)
}

/// Queries and keys for the planted construction with `u = e₀`.
pub fn planted_instance(
    n: usize,
    head_dim: usize,
    segment_size: usize,
    block_size: usize,
    block: usize,
    magnitude: f64,
    rng: RngSpec,
) -> (Matrix<f32>, Matrix<f32>) {
    let mut g = rng.generator();
    let mut k: Matrix<f32> = g.normal_matrix(n, head_dim, 1.0);
    let mut q: Matrix<f32> = g.normal_matrix(n, head_dim, 1.0);
    let planted = block * block_size..((block + 1) * block_size).min(n);
    let final_segment = (n - 1) / segment_size * segment_size..n;
    for t in 0..n {
        let row = k.row_mut(t);
        if planted.contains(&t) {
            row.fill(0.0);
            row[0] = magnitude as f32;
        } else {
            row[0] = 0.0;
        }
        let row = q.row_mut(t);
        if final_segment.contains(&t) {
            row.fill(0.0);
            row[0] = 1.0;
        } else {
            row[0] = 0.0;
        }
    }
    (q, k)
}

pub fn run_cell(n: usize, depth: f64, params: &NeedleParams, rng: RngSpec) -> Result<NeedleCell> {
    let cfg = &params.cfg;
    cfg.validate()?;
    let block = planted_block(n, depth, cfg.block_size)?;
    let (q, k) = planted_instance(n, params.head_dim, cfg.segment_size, cfg.block_size, block, params.magnitude, rng);
    let reps = segment_representatives(q.view(), cfg.segment_size, k.view(), cfg.block_size)?;
    let scores = raw_criticality(&reps, cfg.scale_logits)?;
    let last = scores.n_segments() - 1;
    let row = scores.row(last);
    let selection = select_blocks(row, last, &scores.tiling(), cfg);
    let rank = row.iter().filter(|&&s| s > row[block]).count();
    Ok(NeedleCell {
        n,
        depth,
        planted_block: block,
        selected: selection.blocks.contains(&block),
        rank,
    })
}

pub fn run(params: &NeedleParams) -> Result<NeedleReport> {
    let root = RngSpec::new(params.seed);
    let mut cells = Vec::new();
    for (i, &n) in params.seq_lens.iter().enumerate() {
        for (j, &depth) in params.depths.iter().enumerate() {
            cells.push(run_cell(n, depth, params, root.fork((i * 1000 + j) as u64))?);
        }
    }
    let found = cells.iter().filter(|c| c.selected).count();
    Ok(NeedleReport {
        schema_version: super::SCHEMA_VERSION,
        command: "needle",
        seed: params.seed,
        magnitude: params.magnitude,
        head_dim: params.head_dim,
        config: params.cfg,
        total: cells.len(),
        all_found: found == cells.len(),
        found,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(budget: usize) -> NeedleParams {
        NeedleParams {
            seq_lens: vec![2048, 4096],
            depths: vec![0.1, 0.5, 0.9],
            head_dim: 16,
            magnitude: 10.0,
            cfg: PrunedAttnConfig {
                budget,
                ..Default::default()
            },
            seed: 1,
        }
    }

    #[test]
    fn planted_block_found_everywhere() {
        let r = run(&params(1024)).unwrap();
        assert!(r.all_found, "{:?}", r.cells);
        assert!(r.cells.iter().all(|c| c.rank == 0));
    }

    #[test]
    fn full_budget_always_finds() {
        let mut p = params(4096);
        p.magnitude = 0.0;
        assert!(run(&p).unwrap().all_found);
    }

    #[test]
    fn depth_out_of_range() {
        assert!(planted_block(1024, 1.0, 32).is_err());
        assert!(planted_block(1024, 1.5, 32).is_err());
        assert_eq!(planted_block(1024, 0.5, 32).unwrap(), 16);
    }
}

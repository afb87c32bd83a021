//! Partition of a length-`n` sequence into query segments and cache blocks.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segment/block partition of a sequence. The final segment and block may be
/// shorter than the nominal size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiling {
    pub n: usize,
    pub segment_size: usize,
    pub block_size: usize,
}

impl Tiling {
    pub fn new(n: usize, segment_size: usize, block_size: usize) -> Result<Self> {
        if segment_size == 0 || block_size == 0 {
            return Err(Error::config("segment_size and block_size must be at least 1"));
        }
        if n == 0 {
            return Err(Error::EmptyInput("sequence has no tokens"));
        }
        Ok(Self {
            n,
            segment_size,
            block_size,
        })
    }

    pub fn n_segments(&self) -> usize {
        self.n.div_ceil(self.segment_size)
    }

    pub fn n_blocks(&self) -> usize {
        self.n.div_ceil(self.block_size)
    }

    pub fn segment_range(&self, s: usize) -> Range<usize> {
        let start = s * self.segment_size;
        start..(start + self.segment_size).min(self.n)
    }

    pub fn block_range(&self, b: usize) -> Range<usize> {
        let start = b * self.block_size;
        start..(start + self.block_size).min(self.n)
    }

    fn segment_last(&self, s: usize) -> usize {
        self.segment_range(s).end - 1
    }

    /// Blocks whose first token precedes or equals the segment's last token.
    pub fn eligible_blocks(&self, s: usize) -> Range<usize> {
        0..self.segment_last(s) / self.block_size + 1
    }

    /// Blocks overlapping the segment's own token range.
    pub fn diagonal_blocks(&self, s: usize) -> Range<usize> {
        self.segment_range(s).start / self.block_size..self.segment_last(s) / self.block_size + 1
    }

    pub fn is_visible(&self, s: usize, b: usize) -> bool {
        b * self.block_size <= self.segment_last(s)
    }
}

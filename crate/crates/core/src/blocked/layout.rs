use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BLOCK: usize = 64;

/// Partition of a sequence into contiguous blocks of `block` tokens. The
/// last block is short when `tail != 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub seq_len: usize,
    pub block: usize,
    pub n_blocks: usize,
    pub tail: usize,
}

pub fn plan_blocks(seq_len: usize, block: usize) -> Result<BlockLayout> {
    if seq_len == 0 || block == 0 {
        return Err(Error::domain(
            "plan_blocks",
            format!("sequence length and block size must be positive (got {seq_len}, {block})"),
        ));
    }
    Ok(BlockLayout {
        seq_len,
        block,
        n_blocks: seq_len.div_ceil(block),
        tail: seq_len % block,
    })
}

impl BlockLayout {
    /// Token indices covered by block `b`.
    pub fn range(&self, b: usize) -> Range<usize> {
        let start = b * self.block;
        start..(start + self.block).min(self.seq_len)
    }

    pub fn block_of(&self, token: usize) -> usize {
        token / self.block
    }

    /// Number of lower-triangular tiles `(qb, kb)` with `kb ≤ qb`.
    pub fn n_tiles(&self) -> usize {
        self.n_blocks * (self.n_blocks + 1) / 2
    }

    /// Dense index of tile `(qb, kb)` in row-major lower-triangular order.
    pub fn tile_index(&self, qb: usize, kb: usize) -> usize {
        debug_assert!(kb <= qb && qb < self.n_blocks);
        qb * (qb + 1) / 2 + kb
    }

    /// Key blocks in the order the forward pass visits them: the diagonal
    /// first, then leftwards.
    pub fn forward_order(&self, qb: usize) -> impl Iterator<Item = usize> {
        (0..=qb).rev()
    }

    /// Key blocks in backward order, left to right up to the diagonal.
    pub fn backward_order(&self, qb: usize) -> impl Iterator<Item = usize> {
        0..=qb
    }

    pub fn tiles(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_blocks).flat_map(|qb| (0..=qb).map(move |kb| (qb, kb)))
    }
}

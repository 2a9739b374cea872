use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::AttentionDims;

/// Square boolean grid over (query block × key block) tiles of a
/// self-attention map. The final block may be ragged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    block_size: usize,
    seq_len: usize,
    n_blocks: usize,
    active: Vec<bool>,
}

impl BlockMask {
    /// Mask from a row-major `n_blocks × n_blocks` grid, `n_blocks = ceil(seq_len / block_size)`.
    pub fn from_grid(block_size: usize, seq_len: usize, active: Vec<bool>) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::ZeroBlockSize);
        }
        let n_blocks = seq_len.div_ceil(block_size);
        if active.len() != n_blocks * n_blocks {
            return Err(Error::ShapeMismatch(format!(
                "grid of {} cells does not match {n_blocks}×{n_blocks} blocks",
                active.len()
            )));
        }
        Ok(Self { block_size, seq_len, n_blocks, active })
    }

    /// Every tile active.
    pub fn full(block_size: usize, seq_len: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::ZeroBlockSize);
        }
        let n = seq_len.div_ceil(block_size);
        Self::from_grid(block_size, seq_len, vec![true; n * n])
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn is_active(&self, query_block: usize, key_block: usize) -> bool {
        self.active[query_block * self.n_blocks + key_block]
    }

    pub fn set_active(&mut self, query_block: usize, key_block: usize, on: bool) {
        self.active[query_block * self.n_blocks + key_block] = on;
    }

    /// Whether query token `i` may attend to key token `j`.
    #[inline]
    pub fn token_active(&self, i: usize, j: usize) -> bool {
        self.is_active(i / self.block_size, j / self.block_size)
    }

    /// Token range covered by block `b`.
    pub fn block_range(&self, b: usize) -> Range<usize> {
        let start = b * self.block_size;
        start..(start + self.block_size).min(self.seq_len)
    }

    /// Active key blocks of one query block, ascending.
    pub fn row(&self, query_block: usize) -> impl Iterator<Item = usize> + '_ {
        let row = &self.active[query_block * self.n_blocks..(query_block + 1) * self.n_blocks];
        row.iter().enumerate().filter(|(_, &a)| a).map(|(j, _)| j)
    }

    pub fn active_blocks(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn total_blocks(&self) -> usize {
        self.n_blocks * self.n_blocks
    }

    /// Number of active (query, key) token pairs, counting ragged blocks by
    /// their true extent.
    pub fn active_positions(&self) -> u64 {
        let mut total = 0u64;
        for i in 0..self.n_blocks {
            let rows = self.block_range(i).len() as u64;
            for j in self.row(i) {
                total += rows * self.block_range(j).len() as u64;
            }
        }
        total
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n_blocks).all(|i| (0..i).all(|j| self.is_active(i, j) == self.is_active(j, i)))
    }
}

/// Parameters of one arrow mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArrowSpec {
    pub dims: AttentionDims,
    pub block_size: usize,
    /// Radius in blocks around the visual diagonal. Values past
    /// [`ArrowSpec::max_window`] clamp to full coverage.
    pub window_blocks: usize,
}

impl ArrowSpec {
    pub fn new(dims: AttentionDims, block_size: usize, window_blocks: usize) -> Self {
        Self { dims, block_size, window_blocks }
    }

    pub fn n_visual_blocks(&self) -> usize {
        self.dims.n_visual.div_ceil(self.block_size.max(1))
    }

    /// Smallest window that makes the mask fully dense.
    pub fn max_window(&self) -> usize {
        self.n_visual_blocks().saturating_sub(1)
    }

    pub fn effective_window(&self) -> usize {
        self.window_blocks.min(self.max_window())
    }
}

/// Arrow pattern: a banded visual-visual region plus dense rows and columns
/// for every block that holds at least one text token.
pub fn build_arrow_mask(spec: &ArrowSpec) -> Result<BlockMask> {
    if spec.block_size == 0 {
        return Err(Error::ZeroBlockSize);
    }
    let dims = &spec.dims;
    let n = dims.seq_len();
    let b = spec.block_size;
    let nb = n.div_ceil(b);
    let text_block: Vec<bool> = (0..nb).map(|blk| (blk * b..((blk + 1) * b).min(n)).any(|t| dims.is_text(t))).collect();
    let w = spec.effective_window();
    let mut active = vec![false; nb * nb];
    for i in 0..nb {
        for j in 0..nb {
            active[i * nb + j] = text_block[i] || text_block[j] || i.abs_diff(j) <= w;
        }
    }
    BlockMask::from_grid(b, n, active)
}

/// Multiply-adds of `Q·Kᵀ` and `P·V` over the active positions: `4·d` per
/// (query, key) pair. Softmax work is not counted.
pub fn flops_count(mask: &BlockMask, head_dim: usize) -> u64 {
    4 * head_dim as u64 * mask.active_positions()
}

pub fn dense_flops(seq_len: usize, head_dim: usize) -> u64 {
    4 * head_dim as u64 * (seq_len as u64) * (seq_len as u64)
}

/// Fraction of the attention map skipped: `1 − active positions / N²`.
pub fn sparsity_ratio(mask: &BlockMask) -> f64 {
    let n = mask.seq_len() as f64;
    1.0 - mask.active_positions() as f64 / (n * n)
}

//! Tiled attention with a streaming softmax.
//!
//! For each query block the kernel walks its active key blocks in ascending
//! order, keeping a running row max `m` and normalizer `l`:
//!
//! ```text
//! S     = Q_i · K_jᵀ / √d
//! m'    = max(m, rowmax(S))
//! P     = exp(S − m')
//! l'    = exp(m − m') · l + rowsum(P)
//! acc'  = exp(m − m') · acc + P · V_j
//! O_i   = acc / l          (after the last block)
//! ```
//!
//! No `N×N` score matrix is materialized. Accumulation order depends only on
//! the mask, so sequential and parallel execution are bit-identical.

use rayon::prelude::*;

use super::mask::BlockMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Running max and normalizer of one softmax row.
#[derive(Debug, Clone, Copy)]
pub struct RunningSoftmax {
    pub max: f32,
    pub sum: f32,
}

impl Default for RunningSoftmax {
    fn default() -> Self {
        Self { max: f32::NEG_INFINITY, sum: 0.0 }
    }
}

impl RunningSoftmax {
    /// Folds a chunk of scores in. `scores` is overwritten with
    /// `exp(score − new_max)`; the returned factor rescales anything
    /// accumulated against the previous max.
    #[inline]
    pub fn absorb(&mut self, scores: &mut [f32]) -> f32 {
        let chunk_max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let new_max = self.max.max(chunk_max);
        let alpha = if self.max == f32::NEG_INFINITY { 0.0 } else { (self.max - new_max).exp() };
        let mut chunk_sum = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - new_max).exp();
            chunk_sum += *s;
        }
        self.sum = self.sum * alpha + chunk_sum;
        self.max = new_max;
        alpha
    }
}

/// Single-pass softmax over `scores` in chunks of `chunk`, renormalizing the
/// already-emitted weights whenever the running max moves.
pub fn streaming_softmax(scores: &[f32], chunk: usize) -> Vec<f32> {
    let mut state = RunningSoftmax::default();
    let mut weights: Vec<f32> = Vec::with_capacity(scores.len());
    for part in scores.chunks(chunk.max(1)) {
        let mut buf = part.to_vec();
        let alpha = state.absorb(&mut buf);
        for w in weights.iter_mut() {
            *w *= alpha;
        }
        weights.extend_from_slice(&buf);
    }
    let inv = 1.0 / state.sum;
    weights.iter_mut().for_each(|w| *w *= inv);
    weights
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

struct Tiling<'a> {
    q: &'a [f32],
    k: &'a [f32],
    v: &'a [f32],
    n: usize,
    d: usize,
    block: usize,
    scale: f32,
}

impl Tiling<'_> {
    fn range(&self, b: usize) -> (usize, usize) {
        (b * self.block, ((b + 1) * self.block).min(self.n))
    }

    /// Computes rows of query block `qb` into `out` (its `rows × d` slice).
    fn query_block(&self, qb: usize, key_blocks: impl Iterator<Item = usize>, out: &mut [f32]) {
        let d = self.d;
        let (r0, r1) = self.range(qb);
        let rows = r1 - r0;
        let mut state = vec![RunningSoftmax::default(); rows];
        let mut scores = vec![0.0f32; self.block];
        out.fill(0.0);
        for kb in key_blocks {
            let (c0, c1) = self.range(kb);
            let cols = c1 - c0;
            let k_blk = &self.k[c0 * d..c1 * d];
            let v_blk = &self.v[c0 * d..c1 * d];
            for r in 0..rows {
                let qi = &self.q[(r0 + r) * d..(r0 + r + 1) * d];
                let s = &mut scores[..cols];
                for (c, sc) in s.iter_mut().enumerate() {
                    *sc = dot(qi, &k_blk[c * d..(c + 1) * d]) * self.scale;
                }
                let alpha = state[r].absorb(s);
                let acc = &mut out[r * d..(r + 1) * d];
                if alpha != 1.0 {
                    acc.iter_mut().for_each(|a| *a *= alpha);
                }
                for (c, &p) in s.iter().enumerate() {
                    let vj = &v_blk[c * d..(c + 1) * d];
                    for (a, &x) in acc.iter_mut().zip(vj) {
                        *a += p * x;
                    }
                }
            }
        }
        for r in 0..rows {
            let inv = 1.0 / state[r].sum;
            out[r * d..(r + 1) * d].iter_mut().for_each(|a| *a *= inv);
        }
    }

    fn run(&self, parallel: bool, key_blocks: impl Fn(usize) -> Vec<usize> + Sync) -> Vec<f32> {
        let mut out = vec![0.0f32; self.n * self.d];
        let stride = self.block * self.d;
        if parallel {
            out.par_chunks_mut(stride)
                .enumerate()
                .for_each(|(qb, chunk)| self.query_block(qb, key_blocks(qb).into_iter(), chunk));
        } else {
            for (qb, chunk) in out.chunks_mut(stride).enumerate() {
                self.query_block(qb, key_blocks(qb).into_iter(), chunk);
            }
        }
        out
    }
}

fn check_inputs(q: &[f32], k: &[f32], v: &[f32], n: usize, d: usize) -> Result<()> {
    if n == 0 || d == 0 || q.len() != n * d || k.len() != n * d || v.len() != n * d {
        return Err(Error::ShapeMismatch(format!("q/k/v must each hold {n}×{d} elements")));
    }
    Ok(())
}

fn finish(out: Vec<f32>) -> Result<Vec<f32>> {
    if out.iter().all(|x| x.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite("tiled attention"))
    }
}

/// Block-sparse attention for one head on `[N×d]` slices, visiting only the
/// active tiles of `mask`.
pub fn sparse_attention_head(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    d: usize,
    mask: &BlockMask,
    parallel: bool,
) -> Result<Vec<f32>> {
    let n = mask.seq_len();
    check_inputs(q, k, v, n, d)?;
    if let Some(qb) = (0..mask.n_blocks()).find(|&qb| mask.row(qb).next().is_none()) {
        return Err(Error::FullyMaskedRow { row: qb * mask.block_size() });
    }
    let tiling = Tiling { q, k, v, n, d, block: mask.block_size(), scale: 1.0 / (d as f32).sqrt() };
    finish(tiling.run(parallel, |qb| mask.row(qb).collect()))
}

/// Dense tiled attention: the same kernel with every tile visited and no
/// mask lookups. Baseline for speedup measurements.
pub fn dense_tiled_attention(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    n: usize,
    d: usize,
    block: usize,
    parallel: bool,
) -> Result<Vec<f32>> {
    if block == 0 {
        return Err(Error::ZeroBlockSize);
    }
    check_inputs(q, k, v, n, d)?;
    let nb = n.div_ceil(block);
    let tiling = Tiling { q, k, v, n, d, block, scale: 1.0 / (d as f32).sqrt() };
    finish(tiling.run(parallel, |_| (0..nb).collect()))
}

/// [`sparse_attention_head`] on `[N×d]` tensors.
pub fn sparse_attention_forward(
    q: &Tensor<f32>,
    k: &Tensor<f32>,
    v: &Tensor<f32>,
    mask: &BlockMask,
) -> Result<Tensor<f32>> {
    let d = match q.shape() {
        &[n, d] if n == mask.seq_len() => d,
        s => return Err(Error::ShapeMismatch(format!("expected [{}, d] per-head input, got {s:?}", mask.seq_len()))),
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::ShapeMismatch("q, k and v shapes differ".into()));
    }
    let out = sparse_attention_head(q.data(), k.data(), v.data(), d, mask, false)?;
    Tensor::new(q.shape().to_vec(), out)
}

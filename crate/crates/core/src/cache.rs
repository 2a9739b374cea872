//! Per-head attention output cache across denoising timesteps.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub output: Tensor<f32>,
    pub produced_at: usize,
}

/// One slot per (layer, head), holding the most recently computed `[N×d]`
/// attention output. Only computed heads write; serving a cached head does
/// not refresh its timestamp.
#[derive(Debug, Clone, Default)]
pub struct HeadCache {
    entries: HashMap<(usize, usize), CacheEntry>,
}

impl HeadCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store(&mut self, layer: usize, head: usize, output: Tensor<f32>, t: usize) {
        self.entries.insert((layer, head), CacheEntry { output, produced_at: t });
    }

    pub fn fetch(&self, layer: usize, head: usize) -> Result<&Tensor<f32>> {
        self.entry(layer, head).map(|e| &e.output)
    }

    pub fn entry(&self, layer: usize, head: usize) -> Result<&CacheEntry> {
        self.entries.get(&(layer, head)).ok_or(Error::CacheMiss { layer, head })
    }

    pub fn contains(&self, layer: usize, head: usize) -> bool {
        self.entries.contains_key(&(layer, head))
    }

    /// Timesteps elapsed since the slot was last written.
    pub fn staleness(&self, layer: usize, head: usize, t: usize) -> Result<usize> {
        Ok(t.saturating_sub(self.entry(layer, head)?.produced_at))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

//! Multi-strategy attention for one (timestep, layer): every head runs Full,
//! Arrow or Cached in one scheduling pass, then computed heads are committed
//! to the cache.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arrow::{build_arrow_mask, dense_flops, flops_count, sparse_attention_head, ArrowSpec, BlockMask};
use crate::cache::HeadCache;
use crate::error::{Error, Result};
use crate::tensor::{attention_head_reference, dims3, AttentionDims, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadStrategy {
    Full,
    Arrow { window_blocks: usize },
    Cached,
}

impl HeadStrategy {
    pub fn is_computed(&self) -> bool {
        !matches!(self, HeadStrategy::Cached)
    }
}

impl fmt::Display for HeadStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadStrategy::Full => f.write_str("full"),
            HeadStrategy::Arrow { window_blocks } => write!(f, "arrow:{window_blocks}"),
            HeadStrategy::Cached => f.write_str("cached"),
        }
    }
}

/// One strategy per head of a layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerPlan {
    pub strategies: Vec<HeadStrategy>,
}

impl LayerPlan {
    pub fn uniform(n_heads: usize, strategy: HeadStrategy) -> Self {
        Self { strategies: vec![strategy; n_heads] }
    }

    pub fn all_full(n_heads: usize) -> Self {
        Self::uniform(n_heads, HeadStrategy::Full)
    }

    pub fn n_heads(&self) -> usize {
        self.strategies.len()
    }

    pub fn validate(&self, n_heads: usize) -> Result<()> {
        if self.strategies.len() != n_heads {
            return Err(Error::InvalidPlan(format!(
                "layer plan has {} heads, expected {n_heads}",
                self.strategies.len()
            )));
        }
        Ok(())
    }
}

/// Outputs of one layer before they are committed to the cache.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub output: Tensor<f32>,
    computed: Vec<bool>,
}

impl LayerOutput {
    /// Stores every computed (non-cached) head.
    pub fn commit(&self, cache: &mut HeadCache, layer: usize, t: usize) {
        let (_, n, d) = dims3(&self.output).expect("layer output is [H, N, d]");
        for (h, _) in self.computed.iter().enumerate().filter(|(_, &c)| c) {
            let head = Tensor::new(vec![n, d], self.output.outer(h).to_vec()).expect("head slice");
            cache.store(layer, h, head, t);
        }
    }
}

/// Executes layer plans for a fixed geometry.
#[derive(Debug, Clone)]
pub struct Dispatcher {
    dims: AttentionDims,
    block_size: usize,
}

impl Dispatcher {
    pub fn new(dims: AttentionDims, block_size: usize) -> Result<Self> {
        dims.validate()?;
        if block_size == 0 {
            return Err(Error::ZeroBlockSize);
        }
        Ok(Self { dims, block_size })
    }

    pub fn dims(&self) -> &AttentionDims {
        &self.dims
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn arrow_mask(&self, window_blocks: usize) -> Result<BlockMask> {
        build_arrow_mask(&ArrowSpec::new(self.dims, self.block_size, window_blocks))
    }

    fn masks_for(&self, plan: &LayerPlan) -> Result<BTreeMap<usize, BlockMask>> {
        let mut masks = BTreeMap::new();
        for s in &plan.strategies {
            if let HeadStrategy::Arrow { window_blocks } = *s {
                if let std::collections::btree_map::Entry::Vacant(e) = masks.entry(window_blocks) {
                    e.insert(self.arrow_mask(window_blocks)?);
                }
            }
        }
        Ok(masks)
    }

    fn check_inputs(&self, q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>) -> Result<()> {
        let expected = self.dims.layer_shape();
        for (name, t) in [("q", q), ("k", k), ("v", v)] {
            if t.shape() != expected.as_slice() {
                return Err(Error::ShapeMismatch(format!("{name} is {:?}, expected {expected:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Computes one head under `strategy`; cached heads are read from `cache`.
    #[allow(clippy::too_many_arguments)]
    pub fn head(
        &self,
        q: &Tensor<f32>,
        k: &Tensor<f32>,
        v: &Tensor<f32>,
        head: usize,
        strategy: HeadStrategy,
        mask: Option<&BlockMask>,
        cache: &HeadCache,
        layer: usize,
    ) -> Result<Vec<f32>> {
        let (n, d) = (self.dims.seq_len(), self.dims.head_dim);
        let (qh, kh, vh) = (q.outer(head), k.outer(head), v.outer(head));
        match strategy {
            HeadStrategy::Full => attention_head_reference(qh, kh, vh, n, d, None),
            HeadStrategy::Arrow { window_blocks } => {
                let owned;
                let mask = match mask {
                    Some(m) => m,
                    None => {
                        owned = self.arrow_mask(window_blocks)?;
                        &owned
                    }
                };
                sparse_attention_head(qh, kh, vh, d, mask, false)
            }
            HeadStrategy::Cached => {
                let cached = cache.fetch(layer, head)?;
                if cached.shape() != [n, d] {
                    return Err(Error::ShapeMismatch(format!(
                        "cached head ({layer}, {head}) is {:?}, expected [{n}, {d}]",
                        cached.shape()
                    )));
                }
                Ok(cached.data().to_vec())
            }
        }
    }

    /// Compute phase: runs all heads without touching the cache.
    pub fn execute(
        &self,
        q: &Tensor<f32>,
        k: &Tensor<f32>,
        v: &Tensor<f32>,
        plan: &LayerPlan,
        cache: &HeadCache,
        layer: usize,
    ) -> Result<LayerOutput> {
        plan.validate(self.dims.n_heads)?;
        self.check_inputs(q, k, v)?;
        let masks = self.masks_for(plan)?;
        let heads: Vec<Vec<f32>> = plan
            .strategies
            .par_iter()
            .enumerate()
            .map(|(h, &s)| {
                let mask = match s {
                    HeadStrategy::Arrow { window_blocks } => masks.get(&window_blocks),
                    _ => None,
                };
                self.head(q, k, v, h, s, mask, cache, layer)
            })
            .collect::<Result<_>>()?;
        let output = Tensor::new(self.dims.layer_shape(), heads.concat())?;
        Ok(LayerOutput { output, computed: plan.strategies.iter().map(HeadStrategy::is_computed).collect() })
    }

    /// Compute, then commit computed heads to `cache` at timestep `t`.
    #[allow(clippy::too_many_arguments)]
    pub fn run(
        &self,
        q: &Tensor<f32>,
        k: &Tensor<f32>,
        v: &Tensor<f32>,
        plan: &LayerPlan,
        cache: &mut HeadCache,
        layer: usize,
        t: usize,
    ) -> Result<Tensor<f32>> {
        let out = self.execute(q, k, v, plan, cache, layer)?;
        out.commit(cache, layer, t);
        Ok(out.output)
    }

    pub fn strategy_flops(&self, strategy: HeadStrategy) -> Result<u64> {
        let (n, d) = (self.dims.seq_len(), self.dims.head_dim);
        Ok(match strategy {
            HeadStrategy::Full => dense_flops(n, d),
            HeadStrategy::Arrow { window_blocks } => flops_count(&self.arrow_mask(window_blocks)?, d),
            HeadStrategy::Cached => 0,
        })
    }

    /// Analytic FLOPs of a layer plan; cached heads cost nothing.
    pub fn plan_flops(&self, plan: &LayerPlan) -> Result<u64> {
        plan.strategies.iter().map(|&s| self.strategy_flops(s)).sum()
    }

    pub fn dense_layer_flops(&self) -> u64 {
        self.dims.n_heads as u64 * dense_flops(self.dims.seq_len(), self.dims.head_dim)
    }
}

/// Runs `plan` for one layer and commits computed heads to `cache`.
#[allow(clippy::too_many_arguments)]
pub fn multi_strategy_attention(
    q: &Tensor<f32>,
    k: &Tensor<f32>,
    v: &Tensor<f32>,
    plan: &LayerPlan,
    cache: &mut HeadCache,
    layer: usize,
    t: usize,
    dims: AttentionDims,
    block_size: usize,
) -> Result<Tensor<f32>> {
    Dispatcher::new(dims, block_size)?.run(q, k, v, plan, cache, layer, t)
}

pub fn plan_flops(plan: &LayerPlan, dims: AttentionDims, block_size: usize) -> Result<u64> {
    Dispatcher::new(dims, block_size)?.plan_flops(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::attention_reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims() -> AttentionDims {
        AttentionDims::new(3, 8, 48, 16)
    }

    fn inputs(seed: u64) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = || Tensor::from_fn(dims().layer_shape(), |_| rng.random_range(-1.5f32..1.5));
        (gen(), gen(), gen())
    }

    fn rel_err(a: &[f32], b: &[f32]) -> f32 {
        let scale = b.iter().fold(0.0f32, |m, x| m.max(x.abs()));
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max) / scale
    }

    #[test]
    fn all_full_is_bitwise_reference() {
        let (q, k, v) = inputs(1);
        let mut cache = HeadCache::new();
        let out = multi_strategy_attention(&q, &k, &v, &LayerPlan::all_full(3), &mut cache, 0, 0, dims(), 16).unwrap();
        assert_eq!(out, attention_reference(&q, &k, &v, None).unwrap());
        assert_eq!(cache.len(), 3);
    }

    #[test]
    fn max_window_arrow_matches_reference() {
        let (q, k, v) = inputs(2);
        let plan = LayerPlan::uniform(3, HeadStrategy::Arrow { window_blocks: 99 });
        let mut cache = HeadCache::new();
        let out = multi_strategy_attention(&q, &k, &v, &plan, &mut cache, 0, 0, dims(), 16).unwrap();
        let reference = attention_reference(&q, &k, &v, None).unwrap();
        assert!(rel_err(out.data(), reference.data()) < 1e-5);
    }

    #[test]
    fn mixed_plan_matches_per_head_oracles() {
        let dispatcher = Dispatcher::new(dims(), 16).unwrap();
        let mut cache = HeadCache::new();
        let (q0, k0, v0) = inputs(3);
        let first = dispatcher.run(&q0, &k0, &v0, &LayerPlan::all_full(3), &mut cache, 2, 0).unwrap();

        let (q, k, v) = inputs(4);
        let plan = LayerPlan {
            strategies: vec![HeadStrategy::Full, HeadStrategy::Arrow { window_blocks: 0 }, HeadStrategy::Cached],
        };
        let out = dispatcher.run(&q, &k, &v, &plan, &mut cache, 2, 1).unwrap();

        let reference = attention_reference(&q, &k, &v, None).unwrap();
        assert_eq!(out.outer(0), reference.outer(0));
        let mask = dispatcher.arrow_mask(0).unwrap();
        let masked = attention_reference(&q.cast::<f64>(), &k.cast::<f64>(), &v.cast::<f64>(), Some(&mask)).unwrap();
        let masked: Vec<f32> = masked.outer(1).iter().map(|&x| x as f32).collect();
        assert!(rel_err(out.outer(1), &masked) < 1e-5);
        assert_eq!(out.outer(2), first.outer(2));

        assert_eq!(cache.entry(2, 0).unwrap().produced_at, 1);
        assert_eq!(cache.entry(2, 1).unwrap().produced_at, 1);
        assert_eq!(cache.entry(2, 2).unwrap().produced_at, 0);
    }

    #[test]
    fn cached_head_without_entry_misses() {
        let (q, k, v) = inputs(5);
        let plan = LayerPlan { strategies: vec![HeadStrategy::Full, HeadStrategy::Cached, HeadStrategy::Full] };
        let mut cache = HeadCache::new();
        let err = multi_strategy_attention(&q, &k, &v, &plan, &mut cache, 0, 0, dims(), 16).unwrap_err();
        assert!(matches!(err, Error::CacheMiss { layer: 0, head: 1 }));
        assert!(cache.is_empty(), "no partial commit");
    }

    #[test]
    fn head_isolation_and_idempotence() {
        let dispatcher = Dispatcher::new(dims(), 16).unwrap();
        let (q, k, v) = inputs(6);
        let mut cache = HeadCache::new();
        dispatcher.run(&q, &k, &v, &LayerPlan::all_full(3), &mut cache, 0, 0).unwrap();
        let a = LayerPlan { strategies: vec![HeadStrategy::Full, HeadStrategy::Full, HeadStrategy::Full] };
        let b = LayerPlan {
            strategies: vec![HeadStrategy::Full, HeadStrategy::Cached, HeadStrategy::Arrow { window_blocks: 1 }],
        };
        let oa = dispatcher.execute(&q, &k, &v, &a, &cache, 0).unwrap().output;
        let ob = dispatcher.execute(&q, &k, &v, &b, &cache, 0).unwrap().output;
        let ob2 = dispatcher.execute(&q, &k, &v, &b, &cache, 0).unwrap().output;
        assert_eq!(oa.outer(0), ob.outer(0));
        assert_eq!(ob, ob2);
    }

    #[test]
    fn flops_accounting() {
        let d = dims();
        let dense = dense_flops(d.seq_len(), d.head_dim);
        assert_eq!(plan_flops(&LayerPlan::all_full(3), d, 16).unwrap(), 3 * dense);
        assert_eq!(plan_flops(&LayerPlan::uniform(3, HeadStrategy::Cached), d, 16).unwrap(), 0);
        let mixed = LayerPlan { strategies: vec![HeadStrategy::Full, HeadStrategy::Cached] };
        let two = AttentionDims { n_heads: 2, ..d };
        assert_eq!(2 * plan_flops(&mixed, two, 16).unwrap(), plan_flops(&LayerPlan::all_full(2), two, 16).unwrap());

        let dispatcher = Dispatcher::new(d, 16).unwrap();
        let plan = LayerPlan {
            strategies: vec![HeadStrategy::Arrow { window_blocks: 0 }, HeadStrategy::Full, HeadStrategy::Cached],
        };
        let per_head: u64 = plan.strategies.iter().map(|&s| dispatcher.strategy_flops(s).unwrap()).sum();
        assert_eq!(dispatcher.plan_flops(&plan).unwrap(), per_head);
        assert_eq!(per_head, flops_count(&dispatcher.arrow_mask(0).unwrap(), d.head_dim) + dense);
    }

    #[test]
    fn strategy_serializes_with_kind_tag() {
        let plan = LayerPlan {
            strategies: vec![HeadStrategy::Full, HeadStrategy::Arrow { window_blocks: 2 }, HeadStrategy::Cached],
        };
        let json = serde_json::to_string(&plan).unwrap();
        assert_eq!(json, r#"[{"kind":"full"},{"kind":"arrow","window_blocks":2},{"kind":"cached"}]"#);
        assert_eq!(serde_json::from_str::<LayerPlan>(&json).unwrap(), plan);
    }
}

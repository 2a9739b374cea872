//! Whole-run compression plans and their JSON file form.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dispatch::{Dispatcher, HeadStrategy, LayerPlan};
use crate::error::{Error, Result};
use crate::tensor::AttentionDims;

pub const PLAN_FILE_VERSION: u32 = 1;

/// Strategy for every (timestep, layer, head), stored timestep-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressionPlan {
    pub dims: AttentionDims,
    pub n_timesteps: usize,
    pub n_layers: usize,
    pub block_size: usize,
    layers: Vec<LayerPlan>,
}

impl CompressionPlan {
    pub fn new(
        dims: AttentionDims,
        n_timesteps: usize,
        n_layers: usize,
        block_size: usize,
        layers: Vec<LayerPlan>,
    ) -> Result<Self> {
        let plan = Self { dims, n_timesteps, n_layers, block_size, layers };
        plan.validate()?;
        Ok(plan)
    }

    pub fn uniform(
        dims: AttentionDims,
        n_timesteps: usize,
        n_layers: usize,
        block_size: usize,
        layer: LayerPlan,
    ) -> Result<Self> {
        Self::new(dims, n_timesteps, n_layers, block_size, vec![layer; n_timesteps * n_layers])
    }

    pub fn all_full(dims: AttentionDims, n_timesteps: usize, n_layers: usize, block_size: usize) -> Self {
        Self::uniform(dims, n_timesteps, n_layers, block_size, LayerPlan::all_full(dims.n_heads))
            .expect("all-Full plan is valid")
    }

    pub fn layer(&self, t: usize, layer: usize) -> &LayerPlan {
        &self.layers[t * self.n_layers + layer]
    }

    pub fn layers(&self) -> &[LayerPlan] {
        &self.layers
    }

    /// Structural checks plus: a head may only be Cached after it has been
    /// computed at an earlier timestep.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.block_size == 0 {
            return Err(Error::ZeroBlockSize);
        }
        if self.n_timesteps == 0 || self.n_layers == 0 {
            return Err(Error::InvalidPlan("plan needs at least one timestep and one layer".into()));
        }
        if self.layers.len() != self.n_timesteps * self.n_layers {
            return Err(Error::InvalidPlan(format!(
                "{} layer plans for {}×{} (timestep, layer) slots",
                self.layers.len(),
                self.n_timesteps,
                self.n_layers
            )));
        }
        for lp in &self.layers {
            lp.validate(self.dims.n_heads)?;
        }
        for l in 0..self.n_layers {
            for h in 0..self.dims.n_heads {
                let mut computed = false;
                for t in 0..self.n_timesteps {
                    match self.layer(t, l).strategies[h] {
                        HeadStrategy::Cached if !computed => {
                            return Err(Error::InvalidPlan(format!(
                                "head {h} of layer {l} is cached at timestep {t} before it was ever computed"
                            )))
                        }
                        HeadStrategy::Cached => {}
                        _ => computed = true,
                    }
                }
            }
        }
        Ok(())
    }

    /// `(planned FLOPs, dense FLOPs)` over the whole run.
    pub fn flops(&self) -> Result<(u64, u64)> {
        let dispatcher = Dispatcher::new(self.dims, self.block_size)?;
        let mut total = 0;
        for lp in &self.layers {
            total += dispatcher.plan_flops(lp)?;
        }
        Ok((total, dispatcher.dense_layer_flops() * self.layers.len() as u64))
    }

    /// FLOPs-weighted sparsity: `1 − planned / dense`.
    pub fn sparsity(&self) -> Result<f64> {
        let (total, dense) = self.flops()?;
        Ok(1.0 - total as f64 / dense as f64)
    }
}

/// `dims` block of the plan file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanFileDims {
    #[serde(rename = "T")]
    pub timesteps: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    pub d: usize,
    pub n_visual: usize,
    pub n_text: usize,
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanFileEntry {
    pub t: usize,
    pub layer: usize,
    pub heads: Vec<HeadStrategy>,
}

/// JSON document describing a calibrated plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub version: u32,
    pub dims: PlanFileDims,
    pub delta: f64,
    pub coeff: f64,
    pub window_set: Vec<usize>,
    pub plan: Vec<PlanFileEntry>,
    pub influence_digest: String,
}

impl PlanFile {
    pub fn from_plan(
        plan: &CompressionPlan,
        delta: f64,
        coeff: f64,
        window_set: Vec<usize>,
        influence_digest: String,
    ) -> Self {
        let mut entries = Vec::with_capacity(plan.layers.len());
        for t in 0..plan.n_timesteps {
            for layer in 0..plan.n_layers {
                entries.push(PlanFileEntry { t, layer, heads: plan.layer(t, layer).strategies.clone() });
            }
        }
        Self {
            version: PLAN_FILE_VERSION,
            dims: PlanFileDims {
                timesteps: plan.n_timesteps,
                layers: plan.n_layers,
                heads: plan.dims.n_heads,
                d: plan.dims.head_dim,
                n_visual: plan.dims.n_visual,
                n_text: plan.dims.n_text,
                block: plan.block_size,
            },
            delta,
            coeff,
            window_set,
            plan: entries,
            influence_digest,
        }
    }

    pub fn attention_dims(&self) -> AttentionDims {
        AttentionDims::new(self.dims.heads, self.dims.d, self.dims.n_visual, self.dims.n_text)
    }

    /// Validates coverage and ordering rules and builds the in-memory plan.
    pub fn to_plan(&self) -> Result<CompressionPlan> {
        if self.version != PLAN_FILE_VERSION {
            return Err(Error::InvalidPlan(format!("unsupported plan version {}", self.version)));
        }
        let d = self.dims;
        let mut slots: Vec<Option<LayerPlan>> = vec![None; d.timesteps * d.layers];
        for e in &self.plan {
            if e.t >= d.timesteps || e.layer >= d.layers {
                return Err(Error::InvalidPlan(format!("entry (t={}, layer={}) is out of range", e.t, e.layer)));
            }
            if e.heads.len() != d.heads {
                return Err(Error::InvalidPlan(format!(
                    "entry (t={}, layer={}) has {} heads, expected {}",
                    e.t,
                    e.layer,
                    e.heads.len(),
                    d.heads
                )));
            }
            if e.t == 0 && e.heads.contains(&HeadStrategy::Cached) {
                return Err(Error::InvalidPlan(format!("layer {} is cached at timestep 0", e.layer)));
            }
            let slot = &mut slots[e.t * d.layers + e.layer];
            if slot.is_some() {
                return Err(Error::InvalidPlan(format!("entry (t={}, layer={}) appears twice", e.t, e.layer)));
            }
            *slot = Some(LayerPlan { strategies: e.heads.clone() });
        }
        let layers = slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or_else(|| {
                    Error::InvalidPlan(format!("missing entry (t={}, layer={})", i / d.layers, i % d.layers))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        CompressionPlan::new(self.attention_dims(), d.timesteps, d.layers, d.block, layers)
    }

    /// Distinct strategies used, for summaries.
    pub fn strategies_used(&self) -> BTreeSet<HeadStrategy> {
        self.plan.iter().flat_map(|e| e.heads.iter().copied()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

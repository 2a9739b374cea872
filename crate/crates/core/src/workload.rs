//! Deterministic synthetic joint-attention workloads.
//!
//! Each (layer, head) gets a locality length `λ` and a drift scale `σ`.
//! Visual queries and keys share random Fourier position features whose
//! frequencies are Cauchy-distributed with scale `1/λ`, so
//! `E[P_i·P_j] = exp(−|i − j| / λ)` and attention mass falls off with
//! distance. A global head (`λ = ∞`) uses zero frequencies and sees a flat
//! positional term. Text tokens carry no positional component. Every later
//! timestep adds `σ·rms·ε` noise to the previous timestep's Q, K and V.

use std::f64::consts::PI;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cache::HeadCache;
use crate::dispatch::Dispatcher;
use crate::error::{Error, Result};
use crate::plan::CompressionPlan;
use crate::tensor::{read_dump_file, write_dump_file, AnyTensor, AttentionDims, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadProfile {
    /// Decay length in tokens; `None` is a global head.
    pub locality: Option<f64>,
    /// Per-timestep perturbation, relative to the tensor's RMS.
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub dims: AttentionDims,
    pub n_layers: usize,
    pub n_timesteps: usize,
    pub block_size: usize,
    pub seed: u64,
    /// Logit magnitude `β`: positional logits span `[0, β]`.
    pub logit_scale: f64,
    /// Relative content noise on visual queries and keys.
    pub content_noise: f64,
    /// Explicit `L × H` profiles (layer-major); `None` uses [`default_profile`].
    #[serde(default)]
    pub profiles: Option<Vec<HeadProfile>>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            dims: AttentionDims::new(8, 32, 256, 32),
            n_layers: 4,
            n_timesteps: 8,
            block_size: 32,
            seed: 0,
            logit_scale: 8.0,
            content_noise: 0.3,
            profiles: None,
        }
    }
}

const LOCALITY_CYCLE: [Option<f64>; 6] = [None, Some(0.25), Some(0.5), Some(1.0), Some(2.0), Some(4.0)];
const DRIFT_CYCLE: [f64; 8] = [0.02, 0.1, 0.05, 0.3, 0.01, 0.2, 0.15, 0.03];

/// Desk profile: head 0 is global, head 1 decays over a quarter block, the
/// rest cycle through a spread of localities (in units of the block size)
/// and drifts, shifted per layer.
pub fn default_profile(layer: usize, head: usize, block_size: usize) -> HeadProfile {
    let locality = match head {
        0 => None,
        1 => Some(0.25),
        _ => LOCALITY_CYCLE[(head + layer) % LOCALITY_CYCLE.len()],
    };
    HeadProfile {
        locality: locality.map(|f| f * block_size as f64),
        drift: DRIFT_CYCLE[(head * 3 + layer) % DRIFT_CYCLE.len()],
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.n_layers == 0 || self.n_timesteps == 0 {
            return Err(Error::InvalidConfig("layers and timesteps must be positive".into()));
        }
        if self.block_size == 0 {
            return Err(Error::ZeroBlockSize);
        }
        if !(self.logit_scale.is_finite() && self.content_noise.is_finite() && self.content_noise >= 0.0) {
            return Err(Error::InvalidConfig("logit scale and content noise must be finite".into()));
        }
        match &self.profiles {
            Some(p) => {
                if p.len() != self.n_layers * self.dims.n_heads {
                    return Err(Error::InvalidConfig(format!(
                        "{} profiles for {} layers × {} heads",
                        p.len(),
                        self.n_layers,
                        self.dims.n_heads
                    )));
                }
                if p.iter()
                    .any(|h| h.drift.is_nan() || h.drift < 0.0 || h.locality.is_some_and(|l| l.is_nan() || l <= 0.0))
                {
                    return Err(Error::InvalidConfig("drift must be ≥ 0 and locality > 0".into()));
                }
            }
            None if self.dims.n_heads < 2 => {
                return Err(Error::InvalidConfig(
                    "default profiles need at least two heads (one global, one local)".into(),
                ))
            }
            None => {}
        }
        Ok(())
    }

    pub fn profile(&self, layer: usize, head: usize) -> HeadProfile {
        match &self.profiles {
            Some(p) => p[layer * self.dims.n_heads + head],
            None => default_profile(layer, head, self.block_size),
        }
    }

    /// Materializes the default profiles so individual heads can be edited.
    pub fn with_explicit_profiles(mut self) -> Self {
        let profiles = (0..self.n_layers)
            .flat_map(|l| (0..self.dims.n_heads).map(move |h| (l, h)))
            .map(|(l, h)| self.profile(l, h))
            .collect();
        self.profiles = Some(profiles);
        self
    }
}

/// Pregenerated Q/K/V for every (timestep, layer), each `[H×N×d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub config: WorkloadConfig,
    q: Vec<Tensor<f32>>,
    k: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

struct HeadStream {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn base_head(config: &WorkloadConfig, profile: HeadProfile, rng: &mut ChaCha8Rng) -> HeadStream {
    let dims = &config.dims;
    let (n, d) = (dims.seq_len(), dims.head_dim);
    let pairs = d / 2;

    let freqs: Vec<f64> = match profile.locality {
        Some(lambda) => {
            let cauchy = Cauchy::new(0.0, 1.0 / lambda).expect("positive scale");
            (0..pairs).map(|_| cauchy.sample(rng)).collect()
        }
        None => vec![0.0; pairs],
    };
    let phases: Vec<f64> = (0..pairs).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let norm = 1.0 / (pairs.max(1) as f64).sqrt();
    // q·k/√d = β·(base_q·base_k) with unit-norm positional parts.
    let amp = (config.logit_scale.abs() * (d as f64).sqrt()).sqrt();
    let noise_std = config.content_noise / (d as f64).sqrt();

    let mut q = vec![0.0; n * d];
    let mut k = vec![0.0; n * d];
    let mut visual_pos = 0usize;
    for tok in 0..n {
        let (qr, kr) = (&mut q[tok * d..(tok + 1) * d], &mut k[tok * d..(tok + 1) * d]);
        if dims.is_text(tok) {
            for c in 0..d {
                qr[c] = amp * rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt();
                kr[c] = amp * rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt();
            }
        } else {
            let p = visual_pos as f64;
            visual_pos += 1;
            for r in 0..pairs {
                let angle = freqs[r] * p + phases[r];
                let (s, c) = angle.sin_cos();
                qr[2 * r] = c * norm;
                qr[2 * r + 1] = s * norm;
                kr[2 * r] = c * norm;
                kr[2 * r + 1] = s * norm;
            }
            for c in 0..d {
                qr[c] = amp * (qr[c] + noise_std * rng.sample::<f64, _>(StandardNormal));
                kr[c] = amp * (kr[c] + noise_std * rng.sample::<f64, _>(StandardNormal));
            }
        }
    }
    let v = gaussian(rng, n * d, 1.0);
    HeadStream { q, k, v }
}

/// Builds the full workload. Identical configs give bit-identical tensors.
pub fn generate(config: &WorkloadConfig) -> Result<Workload> {
    config.validate()?;
    let dims = config.dims;
    let (h_count, n, d) = (dims.n_heads, dims.seq_len(), dims.head_dim);
    let (t_count, l_count) = (config.n_timesteps, config.n_layers);
    let slots = t_count * l_count;
    let mut q = vec![vec![0.0f32; h_count * n * d]; slots];
    let mut k = q.clone();
    let mut v = q.clone();

    for layer in 0..l_count {
        for head in 0..h_count {
            let profile = config.profile(layer, head);
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream((layer * h_count + head) as u64);
            let mut stream = base_head(config, profile, &mut rng);
            let scales = [rms(&stream.q), rms(&stream.k), rms(&stream.v)];
            for t in 0..t_count {
                if t > 0 && profile.drift > 0.0 {
                    for (x, scale) in [&mut stream.q, &mut stream.k, &mut stream.v].into_iter().zip(scales) {
                        let std = profile.drift * scale;
                        for val in x.iter_mut() {
                            *val += std * rng.sample::<f64, _>(StandardNormal);
                        }
                    }
                }
                let slot = t * l_count + layer;
                let range = head * n * d..(head + 1) * n * d;
                for (dst, src) in [(&mut q[slot], &stream.q), (&mut k[slot], &stream.k), (&mut v[slot], &stream.v)] {
                    for (o, &x) in dst[range.clone()].iter_mut().zip(src) {
                        *o = x as f32;
                    }
                }
            }
        }
    }
    let wrap = |data: Vec<Vec<f32>>| -> Result<Vec<Tensor<f32>>> {
        data.into_iter().map(|x| Tensor::new(dims.layer_shape(), x)).collect()
    };
    Ok(Workload { config: config.clone(), q: wrap(q)?, k: wrap(k)?, v: wrap(v)? })
}

impl Workload {
    pub fn dims(&self) -> AttentionDims {
        self.config.dims
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn n_timesteps(&self) -> usize {
        self.config.n_timesteps
    }

    /// Q, K, V of one (timestep, layer).
    pub fn layer(&self, t: usize, layer: usize) -> (&Tensor<f32>, &Tensor<f32>, &Tensor<f32>) {
        let i = t * self.config.n_layers + layer;
        (&self.q[i], &self.k[i], &self.v[i])
    }

    fn stacked(&self, parts: &[Tensor<f32>]) -> Tensor<f32> {
        let c = &self.config;
        let mut shape = vec![c.n_timesteps, c.n_layers];
        shape.extend(c.dims.layer_shape());
        let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(shape, data).expect("stacked shape")
    }

    /// Writes `workload.json` plus `q.dfa2`, `k.dfa2`, `v.dfa2` (each
    /// `[T, L, H, N, d]`) into `dir`.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("workload.json"), serde_json::to_string_pretty(&self.config)? + "\n")?;
        for (name, parts) in [("q", &self.q), ("k", &self.k), ("v", &self.v)] {
            write_dump_file(dir.join(format!("{name}.dfa2")), &AnyTensor::F32(self.stacked(parts)))?;
        }
        Ok(())
    }

    pub fn import(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: WorkloadConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("workload.json"))?)?;
        config.validate()?;
        let mut expected = vec![config.n_timesteps, config.n_layers];
        expected.extend(config.dims.layer_shape());
        let load = |name: &str| -> Result<Vec<Tensor<f32>>> {
            let t = read_dump_file(dir.join(format!("{name}.dfa2")))?.into_f32()?;
            if t.shape() != expected.as_slice() {
                return Err(Error::Format(format!("{name}.dfa2 has shape {:?}, expected {expected:?}", t.shape())));
            }
            let per = t.len() / (config.n_timesteps * config.n_layers);
            t.data().chunks(per).map(|c| Tensor::new(config.dims.layer_shape(), c.to_vec())).collect()
        };
        let (q, k, v) = (load("q")?, load("k")?, load("v")?);
        Ok(Self { config, q, k, v })
    }
}

/// Result of executing a plan over a workload.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    /// Layer outputs, timestep-major.
    pub outputs: Vec<Tensor<f32>>,
    pub flops_total: u64,
    pub flops_dense: u64,
    pub sparsity: f64,
    pub wall_time: Duration,
}

impl PipelineRun {
    pub fn output(&self, t: usize, layer: usize, n_layers: usize) -> &Tensor<f32> {
        &self.outputs[t * n_layers + layer]
    }
}

/// Runs `plan` over every (timestep, layer) in forward order with one shared
/// cache.
pub fn run_pipeline(workload: &Workload, plan: &CompressionPlan) -> Result<PipelineRun> {
    let c = &workload.config;
    if plan.dims.n_heads != c.dims.n_heads
        || plan.dims.head_dim != c.dims.head_dim
        || plan.dims.n_visual != c.dims.n_visual
        || plan.dims.n_text != c.dims.n_text
        || plan.n_layers != c.n_layers
        || plan.n_timesteps != c.n_timesteps
    {
        return Err(Error::InvalidPlan(format!(
            "plan covers {}×{} layers with {:?}, workload has {}×{} with {:?}",
            plan.n_timesteps, plan.n_layers, plan.dims, c.n_timesteps, c.n_layers, c.dims
        )));
    }
    plan.validate()?;
    let dispatcher = Dispatcher::new(c.dims, plan.block_size)?;
    let mut cache = HeadCache::new();
    let mut outputs = Vec::with_capacity(c.n_timesteps * c.n_layers);
    let mut flops_total = 0u64;
    let start = Instant::now();
    for t in 0..c.n_timesteps {
        for layer in 0..c.n_layers {
            let (q, k, v) = workload.layer(t, layer);
            let lp = plan.layer(t, layer);
            outputs.push(dispatcher.run(q, k, v, lp, &mut cache, layer, t)?);
            flops_total += dispatcher.plan_flops(lp)?;
        }
    }
    let wall_time = start.elapsed();
    let flops_dense = dispatcher.dense_layer_flops() * (c.n_timesteps * c.n_layers) as u64;
    Ok(PipelineRun {
        outputs,
        flops_total,
        flops_dense,
        sparsity: 1.0 - flops_total as f64 / flops_dense as f64,
        wall_time,
    })
}

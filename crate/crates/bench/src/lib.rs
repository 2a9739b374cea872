//! Latency harness: dense tiled attention against arrow block-sparse
//! attention at controlled sparsity levels.
//!
//! Both paths share the same tiled kernel, so the measured speedup isolates
//! the effect of skipping tiles. Each configuration reports wall-clock
//! medians and the ideal speedup `1 / (1 − sparsity)`.

use std::io::Write;
use std::time::Instant;

use headwise_core::arrow::{build_arrow_mask, dense_tiled_attention, sparse_attention_head, sparsity_ratio, ArrowSpec};
use headwise_core::tensor::{attention_head_reference, AttentionDims};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

/// Allowed gap between requested and achieved sparsity.
pub const SPARSITY_TOLERANCE: f64 = 0.02;
pub const MIN_ITERS: usize = 20;
pub const MIN_WARMUP: usize = 3;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no window reaches sparsity {target:.3} within ±{SPARSITY_TOLERANCE}; closest is {closest:.3}")]
    Unachievable { target: f64, closest: f64 },
    #[error("need at least {MIN_WARMUP} warmup and {MIN_ITERS} timed iterations, got {warmup} and {iters}")]
    TooFewIterations { warmup: usize, iters: usize },
    #[error(transparent)]
    Core(#[from] headwise_core::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub n_visual: usize,
    pub n_text: usize,
    pub head_dim: usize,
    pub block: usize,
    pub target_sparsity: f64,
    pub warmup: usize,
    pub iters: usize,
    /// Run the kernels across query blocks on the rayon pool.
    pub parallel: bool,
    /// Compare the sparse output against the f64 dense reference.
    pub verify: bool,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(n_visual: usize, n_text: usize, head_dim: usize, block: usize, target_sparsity: f64) -> Self {
        Self {
            n_visual,
            n_text,
            head_dim,
            block,
            target_sparsity,
            warmup: MIN_WARMUP,
            iters: MIN_ITERS,
            parallel: false,
            verify: true,
            seed: 0,
        }
    }

    fn dims(&self) -> AttentionDims {
        AttentionDims::new(1, self.head_dim, self.n_visual, self.n_text)
    }
}

/// The 1K-image token layout at 0 / 25 / 50 / 75 % sparsity.
pub fn standard_configs() -> Vec<BenchConfig> {
    [0.0, 0.25, 0.5, 0.75].into_iter().map(|s| BenchConfig::new(4096, 512, 64, 128, s)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub window_blocks: usize,
    pub achieved_sparsity: f64,
    pub dense_ms: f64,
    pub sparse_ms: f64,
    /// `dense_ms / sparse_ms`.
    pub speedup: f64,
    /// `1 / (1 − achieved_sparsity)`.
    pub ideal: f64,
    /// Max abs error of the sparse output over the max abs reference value;
    /// `None` when verification was off.
    pub oracle_error: Option<f64>,
}

#[derive(Debug, Serialize)]
struct CsvRow {
    n_visual: usize,
    n_text: usize,
    head_dim: usize,
    block: usize,
    target_sparsity: f64,
    achieved_sparsity: f64,
    dense_ms: f64,
    sparse_ms: f64,
    speedup: f64,
    ideal: f64,
}

/// Window whose arrow mask lands closest to `target` sparsity.
pub fn window_for_sparsity(dims: AttentionDims, block: usize, target: f64) -> Result<(usize, f64), BenchError> {
    let max = ArrowSpec::new(dims, block, 0).max_window();
    let mut best: Option<(usize, f64)> = None;
    for w in 0..=max {
        let s = sparsity_ratio(&build_arrow_mask(&ArrowSpec::new(dims, block, w))?);
        if best.is_none_or(|(_, b)| (s - target).abs() < (b - target).abs()) {
            best = Some((w, s));
        }
    }
    let (w, s) = best.expect("at least one window");
    if (s - target).abs() > SPARSITY_TOLERANCE {
        return Err(BenchError::Unachievable { target, closest: s });
    }
    Ok((w, s))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn millis(f: impl FnOnce()) -> f64 {
    let start = Instant::now();
    f();
    start.elapsed().as_secs_f64() * 1e3
}

pub fn run_one(config: &BenchConfig) -> Result<BenchResult, BenchError> {
    if config.warmup < MIN_WARMUP || config.iters < MIN_ITERS {
        return Err(BenchError::TooFewIterations { warmup: config.warmup, iters: config.iters });
    }
    let dims = config.dims();
    let (window_blocks, achieved) = window_for_sparsity(dims, config.block, config.target_sparsity)?;
    let mask = build_arrow_mask(&ArrowSpec::new(dims, config.block, window_blocks))?;
    let (n, d) = (dims.seq_len(), config.head_dim);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut gen = || (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
    let (q, k, v) = (gen(), gen(), gen());

    let dense = || dense_tiled_attention(&q, &k, &v, n, d, config.block, config.parallel);
    let sparse = || sparse_attention_head(&q, &k, &v, d, &mask, config.parallel);
    for _ in 0..config.warmup {
        std::hint::black_box(dense()?);
        std::hint::black_box(sparse()?);
    }
    let mut dense_times = Vec::with_capacity(config.iters);
    let mut sparse_times = Vec::with_capacity(config.iters);
    let mut last = Vec::new();
    for _ in 0..config.iters {
        let mut out = Ok(Vec::new());
        dense_times.push(millis(|| out = dense()));
        std::hint::black_box(out?);
        let mut out = Ok(Vec::new());
        sparse_times.push(millis(|| out = sparse()));
        last = out?;
    }

    let oracle_error = if config.verify {
        let up = |x: &[f32]| x.iter().map(|&a| a as f64).collect::<Vec<_>>();
        let expected = attention_head_reference(&up(&q), &up(&k), &up(&v), n, d, Some(&mask))?;
        let scale = expected.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
        let err = last.iter().zip(&expected).map(|(&g, &e)| (g as f64 - e).abs()).fold(0.0, f64::max);
        Some(err / scale)
    } else {
        None
    };

    let (dense_ms, sparse_ms) = (median(dense_times), median(sparse_times));
    Ok(BenchResult {
        config: config.clone(),
        window_blocks,
        achieved_sparsity: achieved,
        dense_ms,
        sparse_ms,
        speedup: dense_ms / sparse_ms,
        ideal: 1.0 / (1.0 - achieved),
        oracle_error,
    })
}

pub fn run_bench(configs: &[BenchConfig]) -> Result<Vec<BenchResult>, BenchError> {
    configs.iter().map(run_one).collect()
}

/// CSV with columns
/// `n_visual,n_text,head_dim,block,target_sparsity,achieved_sparsity,dense_ms,sparse_ms,speedup,ideal`.
pub fn write_csv<W: Write>(w: W, results: &[BenchResult]) -> Result<(), BenchError> {
    let mut writer = csv::Writer::from_writer(w);
    for r in results {
        writer.serialize(CsvRow {
            n_visual: r.config.n_visual,
            n_text: r.config.n_text,
            head_dim: r.config.head_dim,
            block: r.config.block,
            target_sparsity: r.config.target_sparsity,
            achieved_sparsity: r.achieved_sparsity,
            dense_ms: r.dense_ms,
            sparse_ms: r.sparse_ms,
            speedup: r.speedup,
            ideal: r.ideal,
        })?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

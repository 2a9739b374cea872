//! Oracle checks behind `headwise verify`.
//!
//! The masked-dense oracle rebuilds the arrow pattern token by token and
//! evaluates attention with a naive float64 loop, sharing no code with the
//! kernel under test.

use headwise_core::arrow::{
    build_arrow_mask, sparse_attention_forward, sparse_attention_head, streaming_softmax, ArrowSpec,
};
use headwise_core::cache::HeadCache;
use headwise_core::dispatch::{Dispatcher, HeadStrategy, LayerPlan};
use headwise_core::solver::{brute_force, solve, CostModel, MethodCost, PlanProblem};
use headwise_core::tensor::{AttentionDims, Tensor, TokenOrder};
use headwise_core::workload::{generate, WorkloadConfig};
use headwise_core::Error;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error bound for the kernel against the float64 oracle.
pub const KERNEL_TOLERANCE: f64 = 1e-5;
/// Absolute error bound on streamed softmax weights.
pub const SOFTMAX_TOLERANCE: f64 = 1e-6;

pub const DEFAULT_SIZES: [usize; 4] = [17, 64, 130, 288];
pub const DEFAULT_BLOCKS: [usize; 3] = [16, 32, 128];

/// Deliberate defects for checking that the checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Kernel masks are built with one extra block of window.
    MaskOffByOne,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub sizes: Vec<usize>,
    pub blocks: Vec<usize>,
    pub seeds_per_case: u64,
    pub solver_instances: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            sizes: DEFAULT_SIZES.to_vec(),
            blocks: DEFAULT_BLOCKS.to_vec(),
            seeds_per_case: 5,
            solver_instances: 300,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelCase {
    pub seq_len: usize,
    pub n_text: usize,
    pub head_dim: usize,
    pub block: usize,
    pub window: usize,
    pub order: TokenOrder,
    pub seed: u64,
    pub rel_err: f64,
}

impl KernelCase {
    pub fn passed(&self) -> bool {
        self.rel_err <= KERNEL_TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, scale: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Token-level arrow predicate, enumerated from scratch.
fn oracle_active(dims: &AttentionDims, block: usize, window: usize) -> Vec<bool> {
    let n = dims.seq_len();
    let n_blocks = n.div_ceil(block);
    let mut has_text = vec![false; n_blocks];
    for tok in 0..n {
        if dims.is_text(tok) {
            has_text[tok / block] = true;
        }
    }
    let visual_blocks = dims.n_visual.div_ceil(block);
    let w = window.min(visual_blocks.saturating_sub(1));
    let mut active = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let (bi, bj) = (i / block, j / block);
            active[i * n + j] = has_text[bi] || has_text[bj] || bi.abs_diff(bj) <= w;
        }
    }
    active
}

/// Naive masked softmax attention in float64.
pub fn masked_dense_oracle(q: &[f32], k: &[f32], v: &[f32], d: usize, active: &[bool]) -> Vec<f64> {
    let n = q.len() / d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0f64; n * d];
    let mut scores = vec![0.0f64; n];
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if active[i * n + j] {
                let dot: f64 = (0..d).map(|c| q[i * d + c] as f64 * k[j * d + c] as f64).sum();
                scores[j] = dot * scale;
                max = max.max(scores[j]);
            }
        }
        let mut denom = 0.0;
        for j in 0..n {
            if active[i * n + j] {
                let p = (scores[j] - max).exp();
                denom += p;
                for c in 0..d {
                    out[i * d + c] += p * v[j * d + c] as f64;
                }
            }
        }
        for c in 0..d {
            out[i * d + c] /= denom;
        }
    }
    out
}

fn relative_error(got: &[f32], expected: &[f64]) -> f64 {
    let scale = expected.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let err = got.iter().zip(expected).map(|(&g, &e)| (g as f64 - e).abs()).fold(0.0, f64::max);
    err / scale
}

/// Every (size, block, window ∈ {0, 1, 2, max}, seed) combination. Odd seeds
/// put text first; head dims cycle through 8, 16, 32.
pub fn kernel_cases(opts: &VerifyOptions) -> Result<Vec<KernelCase>, Error> {
    let mut cases = Vec::new();
    for &n in &opts.sizes {
        if n < 2 {
            return Err(Error::InvalidConfig(format!("sequence length {n} leaves no room for text tokens")));
        }
        let n_text = (n / 8).max(1);
        for &block in &opts.blocks {
            let max = (n - n_text).div_ceil(block.max(1)).saturating_sub(1);
            for window in [0, 1, 2, max] {
                for s in 0..opts.seeds_per_case {
                    let seed = opts.seed.wrapping_add(cases.len() as u64);
                    let head_dim = [8, 16, 32][(s % 3) as usize];
                    let mut dims = AttentionDims::new(1, head_dim, n - n_text, n_text);
                    if s % 2 == 1 {
                        dims.order = TokenOrder::TextFirst;
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let q = uniform(&mut rng, n * head_dim, 2.0);
                    let k = uniform(&mut rng, n * head_dim, 2.0);
                    let v = uniform(&mut rng, n * head_dim, 1.0);

                    let kernel_window = match opts.fault {
                        Some(Fault::MaskOffByOne) => window + 1,
                        None => window,
                    };
                    let mask = build_arrow_mask(&ArrowSpec::new(dims, block, kernel_window))?;
                    let tensor = |x: &[f32]| Tensor::new(vec![n, head_dim], x.to_vec());
                    let got = sparse_attention_forward(&tensor(&q)?, &tensor(&k)?, &tensor(&v)?, &mask)?;
                    let expected = masked_dense_oracle(&q, &k, &v, head_dim, &oracle_active(&dims, block, window));
                    cases.push(KernelCase {
                        seq_len: n,
                        n_text,
                        head_dim,
                        block,
                        window,
                        order: dims.order,
                        seed,
                        rel_err: relative_error(got.data(), &expected),
                    });
                }
            }
        }
    }
    Ok(cases)
}

const SOLVER_DELTAS: [f64; 4] = [0.0, 0.2, 0.6, 1.0];
const SOLVER_COEFFS: [f64; 3] = [1.0, 1.5, 2.0];

/// Draw from `[0, 1)`, snapped to a coarse grid a fifth of the time so that
/// ties show up.
fn tie_prone(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random_bool(0.2) {
        rng.random_range(0..5) as f64 * 0.1
    } else {
        rng.random()
    }
}

/// Random instance with up to 8 heads and 3 methods; about one influence in
/// ten is unavailable.
pub fn random_problem(rng: &mut ChaCha8Rng) -> PlanProblem {
    let pool = [
        HeadStrategy::Arrow { window_blocks: 0 },
        HeadStrategy::Arrow { window_blocks: 1 },
        HeadStrategy::Arrow { window_blocks: 2 },
        HeadStrategy::Cached,
    ];
    let h = rng.random_range(1..=8);
    let m = rng.random_range(1..=3);
    let mut picked = sample(rng, pool.len(), m).into_vec();
    picked.sort_unstable();
    let methods: Vec<HeadStrategy> = picked.into_iter().map(|i| pool[i]).collect();
    let costs = CostModel {
        full_cost: 1.0,
        methods: methods.iter().map(|&strategy| MethodCost { strategy, cost: tie_prone(rng) }).collect(),
    };
    let influences =
        (0..h).map(|_| (0..m).map(|_| (!rng.random_bool(0.1)).then(|| tie_prone(rng))).collect()).collect();
    PlanProblem {
        methods,
        costs,
        influences,
        delta: SOLVER_DELTAS[rng.random_range(0..SOLVER_DELTAS.len())],
        coeff: SOLVER_COEFFS[rng.random_range(0..SOLVER_COEFFS.len())],
    }
}

/// Solves `count` random instances both ways; returns descriptions of every
/// disagreement.
pub fn solver_mismatches(count: usize, seed: u64) -> Result<Vec<String>, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = Vec::new();
    for i in 0..count {
        let problem = random_problem(&mut rng);
        let fast = solve(&problem)?;
        let slow = brute_force(&problem)?;
        if fast.assignment != slow.assignment || fast.objective != slow.objective {
            mismatches.push(format!(
                "instance {i}: solve {:?} (objective {}), brute force {:?} (objective {})",
                fast.assignment, fast.objective, slow.assignment, slow.objective
            ));
        }
    }
    Ok(mismatches)
}

/// Largest deviation of the streamed softmax from a float64 softmax, and
/// whether the parallel kernel reproduced the sequential one bit for bit.
pub fn softmax_parity(sizes: &[usize], seed: u64) -> Result<(f64, bool), Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut bitwise = true;
    for &n in sizes {
        let scores: Vec<f32> = (0..n).map(|_| rng.random_range(-30.0f32..30.0)).collect();
        let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s as f64));
        let exps: Vec<f64> = scores.iter().map(|&s| (s as f64 - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for chunk in [1, 7, 16, n] {
            let got = streaming_softmax(&scores, chunk);
            for (g, e) in got.iter().zip(&exps) {
                worst = worst.max((*g as f64 - e / total).abs());
            }
        }

        let n_text = (n / 8).max(1);
        let dims = AttentionDims::new(1, 16, n.saturating_sub(n_text).max(1), n_text);
        let len = dims.seq_len() * 16;
        let (q, k, v) = (uniform(&mut rng, len, 2.0), uniform(&mut rng, len, 2.0), uniform(&mut rng, len, 1.0));
        let mask = build_arrow_mask(&ArrowSpec::new(dims, 16, 1))?;
        let seq = sparse_attention_head(&q, &k, &v, 16, &mask, false)?;
        let par = sparse_attention_head(&q, &k, &v, 16, &mask, true)?;
        bitwise &= seq.iter().zip(&par).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    Ok((worst, bitwise))
}

fn head_bits(t: &Tensor<f32>, h: usize) -> Vec<u32> {
    t.outer(h).iter().map(|x| x.to_bits()).collect()
}

/// Replays a three-step, two-head schedule by hand and checks what the cache
/// holds after each step. Returns every broken expectation.
pub fn cache_semantics() -> Result<Vec<String>, Error> {
    let config = WorkloadConfig {
        dims: AttentionDims::new(2, 8, 48, 16),
        n_layers: 1,
        n_timesteps: 3,
        block_size: 16,
        ..WorkloadConfig::default()
    };
    let workload = generate(&config)?;
    let dispatcher = Dispatcher::new(config.dims, config.block_size)?;
    let arrow = HeadStrategy::Arrow { window_blocks: 0 };
    let schedule = [
        LayerPlan::all_full(2),
        LayerPlan { strategies: vec![HeadStrategy::Cached, arrow] },
        LayerPlan { strategies: vec![HeadStrategy::Cached, HeadStrategy::Cached] },
    ];
    let mut failures = Vec::new();
    let mut cache = HeadCache::new();

    let (q, k, v) = workload.layer(0, 0);
    match dispatcher.execute(q, k, v, &schedule[1], &cache, 0) {
        Err(Error::CacheMiss { .. }) => {}
        other => failures.push(format!("cached read from an empty cache gave {other:?}")),
    }

    let mut outputs = Vec::new();
    for (t, plan) in schedule.iter().enumerate() {
        let (q, k, v) = workload.layer(t, 0);
        let pending = dispatcher.execute(q, k, v, plan, &cache, 0)?;
        if t > 0 && cache.entry(0, 1)?.produced_at != t - 1 {
            failures.push(format!("execute at t={t} wrote to the cache before commit"));
        }
        pending.commit(&mut cache, 0, t);
        outputs.push(pending.output);
    }

    if head_bits(&outputs[1], 0) != head_bits(&outputs[0], 0) || head_bits(&outputs[2], 0) != head_bits(&outputs[0], 0)
    {
        failures.push("cached head 0 differs from its t=0 computation".into());
    }
    if head_bits(&outputs[2], 1) != head_bits(&outputs[1], 1) {
        failures.push("cached head 1 differs from its t=1 computation".into());
    }
    if cache.staleness(0, 0, 2)? != 2 {
        failures.push(format!("head 0 staleness at t=2 is {}, expected 2", cache.staleness(0, 0, 2)?));
    }
    if cache.entry(0, 1)?.produced_at != 1 {
        failures.push("head 1 was not refreshed by its t=1 computation".into());
    }
    Ok(failures)
}

/// Runs the whole suite in a fixed order.
pub fn run_checks(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>, Error> {
    let mut outcomes = Vec::new();

    let cases = kernel_cases(opts)?;
    let failed: Vec<&KernelCase> = cases.iter().filter(|c| !c.passed()).collect();
    let worst = cases.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    let mut detail = format!("{} cases, max relative error {worst:.2e}", cases.len());
    if let Some(c) = failed.first() {
        detail += &format!(
            "; {} failed, first: N={} B={} w={} seed={} error {:.2e}",
            failed.len(),
            c.seq_len,
            c.block,
            c.window,
            c.seed,
            c.rel_err
        );
    }
    outcomes.push(CheckOutcome { name: "masked-dense oracle", passed: failed.is_empty(), detail });

    let mismatches = solver_mismatches(opts.solver_instances, opts.seed)?;
    outcomes.push(CheckOutcome {
        name: "brute-force solver oracle",
        passed: mismatches.is_empty(),
        detail: match mismatches.first() {
            None => format!("{} instances agree", opts.solver_instances),
            Some(m) => format!("{} of {} disagree; {m}", mismatches.len(), opts.solver_instances),
        },
    });

    let (worst, bitwise) = softmax_parity(&opts.sizes, opts.seed)?;
    outcomes.push(CheckOutcome {
        name: "streaming-softmax parity",
        passed: worst <= SOFTMAX_TOLERANCE && bitwise,
        detail: format!(
            "max abs error {worst:.2e}; parallel kernel {}",
            if bitwise { "bit-identical" } else { "differs from sequential" }
        ),
    });

    let broken = cache_semantics()?;
    outcomes.push(CheckOutcome {
        name: "cache semantics",
        passed: broken.is_empty(),
        detail: if broken.is_empty() {
            "store, fetch, staleness and commit order hold".into()
        } else {
            broken.join("; ")
        },
    });
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_mask_matches_arrow_on_small_grid() {
        let dims = AttentionDims::new(1, 4, 40, 8);
        for w in 0..4 {
            let mask = build_arrow_mask(&ArrowSpec::new(dims, 16, w)).unwrap();
            let oracle = oracle_active(&dims, 16, w);
            let n = dims.seq_len();
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(mask.token_active(i, j), oracle[i * n + j], "w={w} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn dense_oracle_on_uniform_scores_averages_values() {
        // Zero queries give equal weights over the active keys.
        let (n, d) = (3, 2);
        let q = vec![0.0; n * d];
        let k = vec![1.0; n * d];
        let v = vec![1.0, 0.0, 2.0, 0.0, 3.0, 6.0];
        let out = masked_dense_oracle(&q, &k, &v, d, &[true; 9]);
        assert_eq!(out, vec![2.0, 2.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn pristine_suite_passes() {
        let opts = VerifyOptions { seeds_per_case: 1, solver_instances: 50, ..VerifyOptions::default() };
        for o in run_checks(&opts).unwrap() {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }

    #[test]
    fn off_by_one_fault_is_caught() {
        let opts = VerifyOptions { seeds_per_case: 1, fault: Some(Fault::MaskOffByOne), ..VerifyOptions::default() };
        assert!(kernel_cases(&opts).unwrap().iter().any(|c| !c.passed()));
    }

    #[test]
    fn default_grid_has_enough_cases() {
        let opts = VerifyOptions::default();
        let n = opts.sizes.len() * opts.blocks.len() * 4 * opts.seeds_per_case as usize;
        assert!(n >= 200);
    }
}

//! `headwise` command-line front end.
//!
//! Exit codes: 0 on success, 2 for validation errors (bad flags, malformed
//! or mismatched plans), 3 when an oracle check fails, 1 for I/O trouble.

pub mod verify;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use headwise_bench::{run_one, write_csv, BenchConfig, BenchError};
use headwise_core::calibrate::{default_candidates, influence_digest, CalibrationOptions};
use headwise_core::solver::DEFAULT_COEFF;
use headwise_core::tensor::{write_dump_file, AnyTensor};
use headwise_core::workload::PipelineRun;
use headwise_core::{
    calibrate_model, generate, rse, run_pipeline, CompressionPlan, Error, PlanFile, Tensor, Workload, WorkloadConfig,
};
use serde::Serialize;

use verify::{Fault, VerifyOptions};

/// Environment variable capping the rayon pool.
pub const THREADS_ENV: &str = "DFA2_THREADS";

#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Oracle(String),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Oracle(_) => 3,
        }
    }

    fn invalid(msg: impl fmt::Display) -> Self {
        Failure::Validation(anyhow::anyhow!("{msg}"))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(e) => write!(f, "invalid input: {e:#}"),
            Failure::Oracle(m) => write!(f, "oracle check failed: {m}"),
            Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) => Failure::Runtime(e.into()),
            e => Failure::Validation(e.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Core(e) => e.into(),
            BenchError::Csv(_) => Failure::Runtime(e.into()),
            e => Failure::Validation(e.into()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(
    name = "headwise",
    version,
    about = "Head-wise arrow attention and caching: calibrate, run, verify, benchmark"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic workload and export it as DFA2 dumps.
    Generate(GenerateArgs),
    /// Calibrate a compression plan and write it with its influence table.
    Calibrate(CalibrateArgs),
    /// Execute a plan and report sparsity and error against full attention.
    Run(RunArgs),
    /// Run the oracle suite.
    Verify(VerifyArgs),
    /// Time dense tiled against arrow attention.
    Bench(BenchArgs),
}

/// Workload geometry. Unset values fall back to the built-in defaults, or to the
/// plan's dimensions for `run`.
#[derive(Debug, Clone, Default, Args)]
pub struct WorkloadArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub timesteps: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub layers: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub heads: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub head_dim: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub visual_tokens: Option<u64>,
    #[arg(long)]
    pub text_tokens: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub block: Option<u64>,
    /// Read Q/K/V written by `generate` instead of generating them.
    #[arg(long, value_name = "DIR", conflicts_with_all = [
        "seed", "timesteps", "layers", "heads", "head_dim", "visual_tokens", "text_tokens", "block"
    ])]
    pub workload: Option<PathBuf>,
}

impl WorkloadArgs {
    pub fn apply(&self, mut base: WorkloadConfig) -> WorkloadConfig {
        let set = |field: &mut usize, v: Option<u64>| {
            if let Some(v) = v {
                *field = v as usize;
            }
        };
        if let Some(s) = self.seed {
            base.seed = s;
        }
        set(&mut base.n_timesteps, self.timesteps);
        set(&mut base.n_layers, self.layers);
        set(&mut base.dims.n_heads, self.heads);
        set(&mut base.dims.head_dim, self.head_dim);
        set(&mut base.dims.n_visual, self.visual_tokens);
        set(&mut base.dims.n_text, self.text_tokens);
        set(&mut base.block_size, self.block);
        base
    }

    pub fn load(&self, base: WorkloadConfig) -> CliResult<Workload> {
        match &self.workload {
            Some(dir) => Ok(Workload::import(dir)?),
            None => Ok(generate(&self.apply(base))?),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    /// Output directory for `workload.json` and `{q,k,v}.dfa2`.
    #[arg(long, default_value = "workload")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Influence budget per (timestep, layer).
    #[arg(long, default_value_t = 0.4)]
    pub delta: f64,
    /// Constraint coefficient; each selection is capped at coeff·delta/heads.
    #[arg(long, default_value_t = DEFAULT_COEFF)]
    pub coeff: f64,
    /// Arrow window radii in blocks.
    #[arg(long, value_delimiter = ',', default_value = "0,2")]
    pub windows: Vec<usize>,
    #[command(flatten)]
    pub workload: WorkloadArgs,
    /// Plan JSON path.
    #[arg(long, default_value = "plan.json")]
    pub out: PathBuf,
    /// Influence CSV path; defaults to the plan path with a `.csv` extension.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[command(flatten)]
    pub workload: WorkloadArgs,
    /// Report JSON path; printed to stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write every layer output as one `[T, L, H, N, d]` DFA2 dump.
    #[arg(long, value_name = "FILE")]
    pub dump_outputs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Sequence lengths for the kernel and softmax checks.
    #[arg(long, value_delimiter = ',', default_values_t = verify::DEFAULT_SIZES)]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = verify::DEFAULT_BLOCKS)]
    pub blocks: Vec<usize>,
    /// Random cases per (size, block, window).
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 300)]
    pub solver_instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Inject a known defect; the suite should then fail.
    #[arg(long, value_enum)]
    pub fault: Option<Fault>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 4096)]
    pub visual_tokens: usize,
    #[arg(long, default_value_t = 512)]
    pub text_tokens: usize,
    #[arg(long, default_value_t = 64)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 128)]
    pub block: usize,
    /// Target sparsity levels.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75")]
    pub sparsity: Vec<f64>,
    #[arg(long, default_value_t = headwise_bench::MIN_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value_t = headwise_bench::MIN_ITERS)]
    pub iters: usize,
    /// Use the parallel kernel path.
    #[arg(long)]
    pub parallel: bool,
    /// Skip the float64 check of the sparse output.
    #[arg(long)]
    pub no_verify: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Caps the global rayon pool at `DFA2_THREADS` when set.
pub fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::invalid(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Runtime(e.into()))
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Calibrate(a) => cmd_calibrate(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Bench(a) => cmd_bench(&a),
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> CliResult<()> {
    let workload = args.workload.load(WorkloadConfig::default())?;
    workload.export(&args.out)?;
    let c = &workload.config;
    println!(
        "wrote {} ({} timesteps × {} layers × {} heads, N={}, d={})",
        args.out.display(),
        c.n_timesteps,
        c.n_layers,
        c.dims.n_heads,
        c.dims.seq_len(),
        c.dims.head_dim
    );
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CalibrateSummary {
    pub plan_file: PlanFile,
    pub influence_csv: String,
    pub sparsity: f64,
    pub attention_evaluations: usize,
    pub wall_time_s: f64,
}

/// Calibrates `workload` and packages the plan file and influence CSV.
pub fn calibrate_to_file(
    workload: &Workload,
    delta: f64,
    coeff: f64,
    windows: &[usize],
) -> CliResult<CalibrateSummary> {
    if windows.is_empty() {
        return Err(Failure::invalid("--windows needs at least one radius"));
    }
    let mut sorted = windows.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != windows.len() {
        return Err(Failure::invalid(format!("--windows {windows:?} repeats a radius")));
    }
    let candidates = default_candidates(windows);
    let start = Instant::now();
    let result = calibrate_model(workload, &candidates, delta, coeff, &CalibrationOptions::default())?;
    let wall_time_s = start.elapsed().as_secs_f64();
    let influence_csv = result.influences.to_csv_string()?;
    let plan_file = PlanFile::from_plan(&result.plan, delta, coeff, windows.to_vec(), influence_digest(&influence_csv));
    Ok(CalibrateSummary {
        sparsity: result.plan.sparsity()?,
        plan_file,
        influence_csv,
        attention_evaluations: result.counter.attention_evaluations,
        wall_time_s,
    })
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> CliResult<()> {
    let workload = args.workload.load(WorkloadConfig::default())?;
    let summary = calibrate_to_file(&workload, args.delta, args.coeff, &args.windows)?;
    let csv_path = args.csv.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    summary.plan_file.save(&args.out)?;
    std::fs::write(&csv_path, &summary.influence_csv)?;

    let mut counts = std::collections::BTreeMap::new();
    for e in &summary.plan_file.plan {
        for s in &e.heads {
            *counts.entry(*s).or_insert(0usize) += 1;
        }
    }
    let c = &workload.config;
    println!(
        "calibrated {} timesteps × {} layers × {} heads, delta {}, coeff {}, windows {:?}",
        c.n_timesteps, c.n_layers, c.dims.n_heads, args.delta, args.coeff, args.windows
    );
    let mix: Vec<String> = counts.iter().map(|(s, n)| format!("{s} {n}")).collect();
    println!("heads: {}", mix.join(", "));
    println!("sparsity: {}", summary.sparsity);
    println!("attention evaluations: {}", summary.attention_evaluations);
    println!("wall time: {:.3} s", summary.wall_time_s);
    println!("plan: {}", args.out.display());
    println!("influences: {}", csv_path.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub sparsity: f64,
    /// Fraction of attention FLOPs removed, `1 − planned / dense`.
    pub flops_reduction: f64,
    pub flops_total: u64,
    pub flops_dense: u64,
    /// Output RSE against full attention per (timestep, layer), timestep-major.
    pub layer_rse: Vec<f64>,
    pub mean_layer_rse: f64,
    pub max_layer_rse: f64,
    pub wall_time_s: f64,
    pub baseline_wall_time_s: f64,
}

/// Loads and validates a plan file before anything runs.
pub fn load_plan(path: &Path) -> CliResult<CompressionPlan> {
    let text = std::fs::read_to_string(path)?;
    Ok(PlanFile::from_json(&text)?.to_plan()?)
}

fn check_match(plan: &CompressionPlan, c: &WorkloadConfig) -> CliResult<()> {
    let p = (
        plan.n_timesteps,
        plan.n_layers,
        plan.dims.n_heads,
        plan.dims.head_dim,
        plan.dims.n_visual,
        plan.dims.n_text,
        plan.block_size,
    );
    let w = (c.n_timesteps, c.n_layers, c.dims.n_heads, c.dims.head_dim, c.dims.n_visual, c.dims.n_text, c.block_size);
    if p != w {
        return Err(Failure::invalid(format!(
            "plan dims (T, L, H, d, n_visual, n_text, block) = {p:?} do not match workload {w:?}"
        )));
    }
    Ok(())
}

/// Runs `plan` and the all-full baseline over `workload`.
pub fn execute_plan(workload: &Workload, plan: &CompressionPlan) -> CliResult<(RunReport, PipelineRun)> {
    check_match(plan, &workload.config)?;
    let baseline_plan = CompressionPlan::all_full(plan.dims, plan.n_timesteps, plan.n_layers, plan.block_size);
    let baseline = run_pipeline(workload, &baseline_plan)?;
    let planned = run_pipeline(workload, plan)?;
    let layer_rse =
        planned.outputs.iter().zip(&baseline.outputs).map(|(y, y0)| rse(y, y0)).collect::<Result<Vec<_>, _>>()?;
    let report = RunReport {
        sparsity: planned.sparsity,
        flops_reduction: 1.0 - planned.flops_total as f64 / planned.flops_dense as f64,
        flops_total: planned.flops_total,
        flops_dense: planned.flops_dense,
        mean_layer_rse: layer_rse.iter().sum::<f64>() / layer_rse.len() as f64,
        max_layer_rse: layer_rse.iter().copied().fold(0.0, f64::max),
        layer_rse,
        wall_time_s: planned.wall_time.as_secs_f64(),
        baseline_wall_time_s: baseline.wall_time.as_secs_f64(),
    };
    Ok((report, planned))
}

/// Stacks timestep-major layer outputs into `[T, L, H, N, d]`.
pub fn stack_outputs(outputs: &[Tensor<f32>], n_timesteps: usize, n_layers: usize) -> CliResult<Tensor<f32>> {
    let mut shape = vec![n_timesteps, n_layers];
    shape.extend_from_slice(outputs.first().map(|t| t.shape()).unwrap_or(&[]));
    let data = outputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let plan = load_plan(&args.plan)?;
    let base = WorkloadConfig {
        dims: plan.dims,
        n_layers: plan.n_layers,
        n_timesteps: plan.n_timesteps,
        block_size: plan.block_size,
        ..WorkloadConfig::default()
    };
    let config = args.workload.apply(base);
    if args.workload.workload.is_none() {
        check_match(&plan, &config)?;
    }
    let workload = args.workload.load(config)?;
    let (report, run) = execute_plan(&workload, &plan)?;

    if let Some(path) = &args.dump_outputs {
        let stacked = stack_outputs(&run.outputs, plan.n_timesteps, plan.n_layers)?;
        write_dump_file(path, &AnyTensor::F32(stacked))?;
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.into()))? + "\n";
    match &args.report {
        Some(path) => {
            std::fs::write(path, json)?;
            println!("sparsity: {}", report.sparsity);
            println!("mean layer RSE: {:.6e}, max {:.6e}", report.mean_layer_rse, report.max_layer_rse);
            println!("wall time: {:.3} s", report.wall_time_s);
        }
        None => print!("{json}"),
    }
    Ok(())
}

pub fn cmd_verify(args: &VerifyArgs) -> CliResult<()> {
    let opts = VerifyOptions {
        sizes: args.sizes.clone(),
        blocks: args.blocks.clone(),
        seeds_per_case: args.seeds,
        solver_instances: args.solver_instances,
        seed: args.seed,
        fault: args.fault,
    };
    let outcomes = verify::run_checks(&opts)?;
    for o in &outcomes {
        println!("{:<4}  {:<26}  {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Oracle(failed.join(", ")))
    }
}

pub fn cmd_bench(args: &BenchArgs) -> CliResult<()> {
    let mut results = Vec::with_capacity(args.sparsity.len());
    for &target in &args.sparsity {
        let config = BenchConfig {
            warmup: args.warmup,
            iters: args.iters,
            parallel: args.parallel,
            verify: !args.no_verify,
            seed: args.seed,
            ..BenchConfig::new(args.visual_tokens, args.text_tokens, args.head_dim, args.block, target)
        };
        let r = run_one(&config)?;
        eprintln!(
            "sparsity {:.3} (target {target}): dense {:.2} ms, sparse {:.2} ms, speedup {:.2}× (ideal {:.2}×)",
            r.achieved_sparsity, r.dense_ms, r.sparse_ms, r.speedup, r.ideal
        );
        results.push(r);
    }
    match &args.out {
        Some(path) => write_csv(std::fs::File::create(path)?, &results)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_csv(&mut lock, &results)?;
            lock.flush()?;
        }
    }
    let bad: Vec<String> = results
        .iter()
        .filter_map(|r| r.oracle_error.filter(|&e| e > verify::KERNEL_TOLERANCE).map(|e| (r, e)))
        .map(|(r, e)| format!("sparsity {:.3}: relative error {e:.2e}", r.achieved_sparsity))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Oracle(bad.join("; ")))
    }
}

//! Single-layer RSE calibration and progressive plan search.
//!
//! For every (timestep, layer) in forward order: compute the original
//! output once, apply each candidate method once, score every head by
//! relative squared error, solve the layer's plan, splice the chosen outputs
//! into the live forward pass and commit computed heads to the cache. Later
//! layers and timesteps are therefore measured against the compressed run.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::HeadCache;
use crate::dispatch::{Dispatcher, HeadStrategy, LayerPlan};
use crate::error::{Error, Result};
use crate::plan::CompressionPlan;
use crate::solver::{analytic_costs, solve, CostModel, PlanProblem};
use crate::tensor::{Scalar, Tensor};
use crate::workload::Workload;

/// Numerator used by [`rse_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RseForm {
    /// `Σ(y_m − y_o)² / Σ(y_o − ȳ_o)²`.
    #[default]
    Standard,
    /// `Σ(y_m − ȳ_o)² / Σ(y_o − ȳ_o)²`; nonzero even when `y_m == y_o`.
    MeanCentered,
}

/// Relative squared error of `y_m` against the reference `y_o`, accumulated
/// in f64. `ȳ_o` is the mean over all elements.
pub fn rse_with<T: Scalar>(y_m: &[T], y_o: &[T], form: RseForm) -> Result<f64> {
    if y_m.len() != y_o.len() || y_o.is_empty() {
        return Err(Error::ShapeMismatch(format!("rse inputs hold {} and {} elements", y_m.len(), y_o.len())));
    }
    let mean = y_o.iter().map(|x| x.to_f64()).sum::<f64>() / y_o.len() as f64;
    let denom: f64 = y_o.iter().map(|x| (x.to_f64() - mean).powi(2)).sum();
    if denom <= 0.0 {
        return Err(Error::DegenerateReference);
    }
    let numer: f64 = match form {
        RseForm::Standard => y_m.iter().zip(y_o).map(|(m, o)| (m.to_f64() - o.to_f64()).powi(2)).sum(),
        RseForm::MeanCentered => y_m.iter().map(|m| (m.to_f64() - mean).powi(2)).sum(),
    };
    Ok(numer / denom)
}

pub fn rse<T: Scalar>(y_m: &Tensor<T>, y_o: &Tensor<T>) -> Result<f64> {
    if y_m.shape() != y_o.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", y_m.shape(), y_o.shape())));
    }
    rse_with(y_m.data(), y_o.data(), RseForm::Standard)
}

/// A compression method the calibrator may assign.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MethodCandidate {
    pub id: String,
    pub strategy: HeadStrategy,
}

impl From<HeadStrategy> for MethodCandidate {
    fn from(strategy: HeadStrategy) -> Self {
        Self { id: strategy.to_string(), strategy }
    }
}

/// `Arrow(w)` for each window, then `Cached`.
pub fn default_candidates(windows: &[usize]) -> Vec<MethodCandidate> {
    windows
        .iter()
        .map(|&w| HeadStrategy::Arrow { window_blocks: w })
        .chain(std::iter::once(HeadStrategy::Cached))
        .map(MethodCandidate::from)
        .collect()
}

fn validate_candidates(candidates: &[MethodCandidate]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("candidate method set is empty".into()));
    }
    for (i, c) in candidates.iter().enumerate() {
        if c.strategy == HeadStrategy::Full {
            return Err(Error::InvalidConfig("Full is the baseline, not a candidate".into()));
        }
        if candidates[..i].iter().any(|p| p.strategy == c.strategy) {
            return Err(Error::InvalidConfig(format!("duplicate candidate {}", c.strategy)));
        }
    }
    Ok(())
}

impl FromStr for HeadStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(HeadStrategy::Full),
            "cached" => Ok(HeadStrategy::Cached),
            _ => s
                .strip_prefix("arrow:")
                .and_then(|w| w.parse().ok())
                .map(|window_blocks| HeadStrategy::Arrow { window_blocks })
                .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InfluenceRow {
    t: usize,
    layer: usize,
    head: usize,
    method: String,
    influence: f64,
}

/// Measured `I(h, m)` per (timestep, layer, head, method). Methods that were
/// unavailable (an empty cache slot) have no entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InfluenceTable {
    values: BTreeMap<(usize, usize, usize, HeadStrategy), f64>,
}

impl InfluenceTable {
    pub fn insert(&mut self, t: usize, layer: usize, head: usize, method: HeadStrategy, influence: f64) {
        self.values.insert((t, layer, head, method), influence);
    }

    pub fn get(&self, t: usize, layer: usize, head: usize, method: HeadStrategy) -> Option<f64> {
        self.values.get(&(t, layer, head, method)).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize, usize, HeadStrategy), f64)> + '_ {
        self.values.iter().map(|(k, v)| (*k, *v))
    }

    /// CSV with columns `t,layer,head,method,influence`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        for (&(t, layer, head, method), &influence) in &self.values {
            writer.serialize(InfluenceRow { t, layer, head, method: method.to_string(), influence })?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut table = Self::default();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: InfluenceRow = row?;
            table.insert(row.t, row.layer, row.head, row.method.parse()?, row.influence);
        }
        Ok(table)
    }
}

/// `sha256:<hex>` of the given CSV text.
pub fn influence_digest(csv: &str) -> String {
    let hash = Sha256::digest(csv.as_bytes());
    let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

/// Counts attention evaluations: one per original pass and one per
/// candidate pass over a layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounter {
    pub attention_evaluations: usize,
}

/// Everything measured for one (timestep, layer).
#[derive(Debug, Clone)]
pub struct LayerMeasurement {
    /// Full-attention output, `[H×N×d]`.
    pub original: Tensor<f32>,
    /// `outputs[m][h]`: candidate `m` applied to head `h`, if available.
    pub outputs: Vec<Vec<Option<Vec<f32>>>>,
    /// `influences[h][m]`.
    pub influences: Vec<Vec<Option<f64>>>,
}

impl LayerMeasurement {
    /// Assembles the layer output for `plan` from the measured outputs.
    pub fn splice(&self, plan: &LayerPlan, candidates: &[MethodCandidate]) -> Result<Tensor<f32>> {
        let mut out = self.original.clone();
        for (h, s) in plan.strategies.iter().enumerate() {
            if *s == HeadStrategy::Full {
                continue;
            }
            let m = candidates
                .iter()
                .position(|c| c.strategy == *s)
                .ok_or_else(|| Error::InvalidPlan(format!("{s} is not a calibrated candidate")))?;
            let head = self.outputs[m][h]
                .as_ref()
                .ok_or_else(|| Error::InvalidPlan(format!("{s} is unavailable for head {h}")))?;
            out.outer_mut(h).copy_from_slice(head);
        }
        Ok(out)
    }
}

/// Measures every candidate's per-head influence for one layer without
/// touching the cache. Costs exactly `|candidates| + 1` evaluations.
#[allow(clippy::too_many_arguments)]
pub fn influence_for_layer(
    dispatcher: &Dispatcher,
    q: &Tensor<f32>,
    k: &Tensor<f32>,
    v: &Tensor<f32>,
    candidates: &[MethodCandidate],
    cache: &HeadCache,
    layer: usize,
    form: RseForm,
    counter: &mut EvalCounter,
) -> Result<LayerMeasurement> {
    validate_candidates(candidates)?;
    let h_count = dispatcher.dims().n_heads;
    let original = dispatcher.execute(q, k, v, &LayerPlan::all_full(h_count), cache, layer)?.output;
    counter.attention_evaluations += 1;

    let mut outputs = Vec::with_capacity(candidates.len());
    for c in candidates {
        let mask = match c.strategy {
            HeadStrategy::Arrow { window_blocks } => Some(dispatcher.arrow_mask(window_blocks)?),
            _ => None,
        };
        let heads: Vec<Option<Vec<f32>>> = (0..h_count)
            .into_par_iter()
            .map(|h| {
                if c.strategy == HeadStrategy::Cached && !cache.contains(layer, h) {
                    return Ok(None);
                }
                dispatcher.head(q, k, v, h, c.strategy, mask.as_ref(), cache, layer).map(Some)
            })
            .collect::<Result<_>>()?;
        counter.attention_evaluations += 1;
        outputs.push(heads);
    }

    let influences = (0..h_count)
        .map(|h| {
            outputs
                .iter()
                .map(|per_head| per_head[h].as_ref().map(|y| rse_with(y, original.outer(h), form)).transpose())
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerMeasurement { original, outputs, influences })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub rse_form: RseForm,
    /// Latency model; defaults to [`analytic_costs`] over the candidate windows.
    pub costs: Option<CostModel>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { rse_form: RseForm::Standard, costs: None }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub plan: CompressionPlan,
    pub influences: InfluenceTable,
    /// Solver objective per (timestep, layer), timestep-major.
    pub objectives: Vec<f64>,
    /// `Σ selected I` per (timestep, layer), timestep-major.
    pub spent: Vec<f64>,
    /// Compressed layer outputs as produced during calibration.
    pub outputs: Vec<Tensor<f32>>,
    pub counter: EvalCounter,
}

fn window_set(candidates: &[MethodCandidate]) -> Vec<usize> {
    candidates
        .iter()
        .filter_map(|c| match c.strategy {
            HeadStrategy::Arrow { window_blocks } => Some(window_blocks),
            _ => None,
        })
        .collect()
}

fn cost_model(workload: &Workload, candidates: &[MethodCandidate], options: &CalibrationOptions) -> Result<CostModel> {
    match &options.costs {
        Some(c) => Ok(c.clone()),
        None => analytic_costs(workload.dims(), workload.config.block_size, &window_set(candidates)),
    }
}

/// Progressive calibration over the whole workload.
pub fn calibrate_model(
    workload: &Workload,
    candidates: &[MethodCandidate],
    delta: f64,
    coeff: f64,
    options: &CalibrationOptions,
) -> Result<CalibrationResult> {
    validate_candidates(candidates)?;
    if delta.is_nan() || delta < 0.0 || coeff.is_nan() || coeff < 1.0 {
        return Err(Error::InvalidConfig(format!("need delta ≥ 0 and coeff ≥ 1, got {delta} and {coeff}")));
    }
    let costs = cost_model(workload, candidates, options)?;
    let dims = workload.dims();
    let dispatcher = Dispatcher::new(dims, workload.config.block_size)?;
    let methods: Vec<HeadStrategy> = candidates.iter().map(|c| c.strategy).collect();

    let mut cache = HeadCache::new();
    let mut counter = EvalCounter::default();
    let mut table = InfluenceTable::default();
    let (mut layers, mut objectives, mut spent, mut outputs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());

    for t in 0..workload.n_timesteps() {
        for layer in 0..workload.n_layers() {
            let (q, k, v) = workload.layer(t, layer);
            let m =
                influence_for_layer(&dispatcher, q, k, v, candidates, &cache, layer, options.rse_form, &mut counter)?;
            for (h, row) in m.influences.iter().enumerate() {
                for (i, value) in row.iter().enumerate() {
                    if let Some(value) = value {
                        table.insert(t, layer, h, methods[i], *value);
                    }
                }
            }
            let problem = PlanProblem {
                methods: methods.clone(),
                costs: costs.clone(),
                influences: m.influences.clone(),
                delta,
                coeff,
            };
            let solution = solve(&problem)?;
            let lp = solution.to_layer_plan(&problem);
            let out = m.splice(&lp, candidates)?;
            for (h, s) in lp.strategies.iter().enumerate() {
                if s.is_computed() {
                    let head = Tensor::new(vec![dims.seq_len(), dims.head_dim], out.outer(h).to_vec())?;
                    cache.store(layer, h, head, t);
                }
            }
            objectives.push(solution.objective);
            spent.push(solution.total_influence);
            outputs.push(out);
            layers.push(lp);
        }
    }
    let plan =
        CompressionPlan::new(dims, workload.n_timesteps(), workload.n_layers(), workload.config.block_size, layers)?;
    Ok(CalibrationResult { plan, influences: table, objectives, spent, outputs, counter })
}

/// Executes `plan` while re-measuring every layer's candidate influences on
/// the way, as calibration would have seen them.
pub fn replay_influences(
    workload: &Workload,
    plan: &CompressionPlan,
    candidates: &[MethodCandidate],
    form: RseForm,
) -> Result<InfluenceTable> {
    let dispatcher = Dispatcher::new(workload.dims(), plan.block_size)?;
    let mut cache = HeadCache::new();
    let mut counter = EvalCounter::default();
    let mut table = InfluenceTable::default();
    for t in 0..workload.n_timesteps() {
        for layer in 0..workload.n_layers() {
            let (q, k, v) = workload.layer(t, layer);
            let m = influence_for_layer(&dispatcher, q, k, v, candidates, &cache, layer, form, &mut counter)?;
            for (h, row) in m.influences.iter().enumerate() {
                for (c, value) in candidates.iter().zip(row) {
                    if let Some(value) = value {
                        table.insert(t, layer, h, c.strategy, *value);
                    }
                }
            }
            dispatcher.run(q, k, v, plan.layer(t, layer), &mut cache, layer, t)?;
        }
    }
    Ok(table)
}

/// A broken budget or cap constraint found by [`audit_plan`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    MissingInfluence { t: usize, layer: usize, head: usize, method: HeadStrategy },
    OverCap { t: usize, layer: usize, head: usize, influence: f64, cap: f64 },
    OverBudget { t: usize, layer: usize, spent: f64, delta: f64 },
}

/// Checks `Σ selected I ≤ δ` and `I ≤ (c/H)·δ` for every (timestep, layer)
/// of `plan` against `table`.
pub fn audit_plan(plan: &CompressionPlan, table: &InfluenceTable, delta: f64, coeff: f64) -> Vec<Violation> {
    let cap = coeff * delta / plan.dims.n_heads as f64;
    let mut violations = Vec::new();
    for t in 0..plan.n_timesteps {
        for layer in 0..plan.n_layers {
            let mut spent = 0.0;
            for (head, &s) in plan.layer(t, layer).strategies.iter().enumerate() {
                if s == HeadStrategy::Full {
                    continue;
                }
                match table.get(t, layer, head, s) {
                    None => violations.push(Violation::MissingInfluence { t, layer, head, method: s }),
                    Some(influence) => {
                        if influence > cap {
                            violations.push(Violation::OverCap { t, layer, head, influence, cap });
                        }
                        spent += influence;
                    }
                }
            }
            if spent > delta {
                violations.push(Violation::OverBudget { t, layer, spent, delta });
            }
        }
    }
    violations
}

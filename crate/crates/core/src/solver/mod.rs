//! Per-layer plan optimization.
//!
//! Each head takes at most one compression method (otherwise it stays Full).
//! The solver minimizes total latency subject to
//!
//! * `Σ selected I(h, m) ≤ δ` over the layer, and
//! * a per-candidate cap: `(h, m)` is eligible only if `I(h, m) ≤ (c / H)·δ`.
//!
//! This is a multiple-choice knapsack. [`solve`] is exact (branch and bound
//! with an LP bound); [`brute_force`] enumerates every assignment and serves
//! as its oracle. Both rank solutions by `(objective, total influence,
//! assignment)`, where assignments compare head by head with any method
//! preferred over Full and lower method indices first.

mod bnb;
mod brute;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub use bnb::solve;
pub use brute::{brute_force, BRUTE_FORCE_LIMIT};

use crate::arrow::{build_arrow_mask, dense_flops, flops_count, ArrowSpec};
use crate::dispatch::{HeadStrategy, LayerPlan};
use crate::error::{Error, Result};
use crate::tensor::AttentionDims;

/// Default per-head constraint coefficient.
pub const DEFAULT_COEFF: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodCost {
    pub strategy: HeadStrategy,
    pub cost: f64,
}

/// Latency of each strategy, relative to `full_cost` for an uncompressed head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub full_cost: f64,
    pub methods: Vec<MethodCost>,
}

impl CostModel {
    pub fn cost_of(&self, strategy: HeadStrategy) -> Option<f64> {
        if strategy == HeadStrategy::Full {
            return Some(self.full_cost);
        }
        self.methods.iter().find(|m| m.strategy == strategy).map(|m| m.cost)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.full_cost.is_finite() && self.full_cost >= 0.0) {
            return Err(Error::InvalidConfig(format!("full cost {} must be finite and nonnegative", self.full_cost)));
        }
        for m in &self.methods {
            if !(m.cost >= 0.0 && m.cost <= self.full_cost) {
                return Err(Error::InvalidConfig(format!(
                    "cost {} of {} must lie in [0, full cost {}]",
                    m.cost, m.strategy, self.full_cost
                )));
            }
        }
        Ok(())
    }
}

/// FLOPs-ratio latency model: Full = 1, `Arrow(w)` = its mask's FLOPs over
/// dense FLOPs, Cached = 0 (a copy).
pub fn analytic_costs(dims: AttentionDims, block_size: usize, window_set: &[usize]) -> Result<CostModel> {
    dims.validate()?;
    let dense = dense_flops(dims.seq_len(), dims.head_dim) as f64;
    let mut methods = Vec::with_capacity(window_set.len() + 1);
    for &w in window_set {
        let mask = build_arrow_mask(&ArrowSpec::new(dims, block_size, w))?;
        methods.push(MethodCost {
            strategy: HeadStrategy::Arrow { window_blocks: w },
            cost: flops_count(&mask, dims.head_dim) as f64 / dense,
        });
    }
    methods.push(MethodCost { strategy: HeadStrategy::Cached, cost: 0.0 });
    Ok(CostModel { full_cost: 1.0, methods })
}

/// One layer's optimization instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanProblem {
    /// Candidate methods; column order of `influences`.
    pub methods: Vec<HeadStrategy>,
    pub costs: CostModel,
    /// `influences[h][m]`; `None` marks a method unavailable for that head
    /// (e.g. Cached with an empty slot).
    pub influences: Vec<Vec<Option<f64>>>,
    pub delta: f64,
    pub coeff: f64,
}

impl PlanProblem {
    pub fn n_heads(&self) -> usize {
        self.influences.len()
    }

    pub fn n_methods(&self) -> usize {
        self.methods.len()
    }

    /// `(c / H)·δ`.
    pub fn cap(&self) -> f64 {
        self.coeff * self.delta / self.n_heads() as f64
    }

    pub fn method_cost(&self, m: usize) -> f64 {
        self.costs.cost_of(self.methods[m]).expect("validated cost model covers every method")
    }

    /// Influence of `(h, m)` if the pair passes availability and the cap.
    pub fn eligible(&self, h: usize, m: usize) -> Option<f64> {
        self.influences[h][m].filter(|&i| i <= self.cap())
    }

    pub fn validate(&self) -> Result<()> {
        self.costs.validate()?;
        if self.n_heads() == 0 {
            return Err(Error::InvalidConfig("problem has no heads".into()));
        }
        if self.delta.is_nan() || self.delta < 0.0 {
            return Err(Error::InvalidConfig(format!("delta {} must be nonnegative", self.delta)));
        }
        if !self.coeff.is_finite() || self.coeff < 1.0 {
            return Err(Error::InvalidConfig(format!("coefficient {} must be finite and at least 1", self.coeff)));
        }
        for (i, s) in self.methods.iter().enumerate() {
            if *s == HeadStrategy::Full || self.methods[..i].contains(s) {
                return Err(Error::InvalidConfig(format!("method {s} is not a distinct compression method")));
            }
            if self.costs.cost_of(*s).is_none() {
                return Err(Error::InvalidConfig(format!("no cost for method {s}")));
            }
        }
        for (h, row) in self.influences.iter().enumerate() {
            if row.len() != self.n_methods() {
                return Err(Error::InvalidConfig(format!(
                    "head {h} has {} influences, expected {}",
                    row.len(),
                    self.n_methods()
                )));
            }
            if row.iter().flatten().any(|&i| !(i >= 0.0 && i.is_finite())) {
                return Err(Error::InvalidConfig(format!("head {h} has a negative or non-finite influence")));
            }
        }
        Ok(())
    }

    /// Objective and total influence of a complete assignment, summed in head
    /// order. Returns `None` when the assignment breaks a constraint.
    pub fn evaluate(&self, assignment: &[Option<usize>]) -> Option<(f64, f64)> {
        let mut objective = 0.0;
        let mut influence = 0.0;
        for (h, choice) in assignment.iter().enumerate() {
            match *choice {
                None => objective += self.costs.full_cost,
                Some(m) => {
                    influence += self.eligible(h, m)?;
                    objective += self.method_cost(m);
                }
            }
        }
        (influence <= self.delta).then_some((objective, influence))
    }
}

/// An assignment of methods to heads; `None` is Full.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub assignment: Vec<Option<usize>>,
    pub objective: f64,
    pub total_influence: f64,
}

impl Solution {
    pub fn to_layer_plan(&self, problem: &PlanProblem) -> LayerPlan {
        LayerPlan {
            strategies: self.assignment.iter().map(|c| c.map_or(HeadStrategy::Full, |m| problem.methods[m])).collect(),
        }
    }

    /// Ranking used by both solvers; `Less` is better.
    pub(crate) fn rank(&self, other: &Self, n_methods: usize) -> Ordering {
        let code = |c: &Option<usize>| c.unwrap_or(n_methods);
        self.objective
            .total_cmp(&other.objective)
            .then(self.total_influence.total_cmp(&other.total_influence))
            .then_with(|| self.assignment.iter().map(code).cmp(other.assignment.iter().map(code)))
    }
}

//! Head-wise multi-strategy attention for joint visual/text transformers.
//!
//! Every attention head at every (timestep, layer) runs one of three
//! strategies: full attention, arrow attention (a block-sparse band over
//! visual tokens with dense text rows and columns), or a cached output from
//! an earlier timestep. Plans are found by measuring each candidate's
//! single-layer relative squared error and solving a small multiple-choice
//! knapsack per layer, progressively through the forward pass.
//!
//! Modules, bottom-up:
//!
//! * [`tensor`]: dense tensors, reference attention, DFA2 dumps.
//! * [`arrow`]: arrow masks, FLOPs accounting, block-sparse kernel.
//! * [`cache`]: per-head output cache.
//! * [`dispatch`]: per-head strategy execution for one layer.
//! * [`solver`]: exact plan optimization and its brute-force oracle.
//! * [`calibrate`]: RSE influence and progressive calibration.
//! * [`workload`]: deterministic synthetic Q/K/V streams and plan execution.
//! * [`plan`]: whole-run plans and the JSON plan file.

pub mod arrow;
pub mod cache;
pub mod calibrate;
pub mod dispatch;
pub mod error;
pub mod plan;
pub mod solver;
pub mod tensor;
pub mod workload;

pub use arrow::{build_arrow_mask, flops_count, sparse_attention_forward, sparsity_ratio, ArrowSpec, BlockMask};
pub use cache::HeadCache;
pub use calibrate::{
    calibrate_model, rse, CalibrationOptions, CalibrationResult, InfluenceTable, MethodCandidate, RseForm,
};
pub use dispatch::{multi_strategy_attention, plan_flops, Dispatcher, HeadStrategy, LayerPlan};
pub use error::{Error, Result};
pub use plan::{CompressionPlan, PlanFile};
pub use solver::{analytic_costs, brute_force, solve, CostModel, PlanProblem, Solution};
pub use tensor::{attention_reference, matmul, softmax_rows, AttentionDims, Tensor, TokenOrder};
pub use workload::{generate, run_pipeline, PipelineRun, Workload, WorkloadConfig};

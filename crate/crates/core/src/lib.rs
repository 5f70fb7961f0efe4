//! Reliability-aware scaling of on-policy distillation (OPD) rewards.
//!
//! A student samples rollouts; at every position the student's and teacher's
//! top-k candidate sets are compared on the student's own prefix. Positions
//! where compatibility falls below a threshold are drift events. Drift events
//! accumulate into a monotone reliability weight that scales the dense
//! distillation rewards, and the reliable length of each rollout drives a
//! batch-level controller for the maximum response length.
//!
//! Modules:
//! - [`compat`]: overlap, top-p acceptance, drift events, entropy gap
//! - [`reliability`]: cumulative reliability, loss weights, reward scaling
//! - [`budget`]: the dynamic response-budget controller
//! - [`sim`]: tabular student/teacher policies used for desk-scale experiments
//! - [`io`]: trace (JSON lines) and metrics (CSV) files
//! - [`harness`]: end-to-end experiment runner, run comparison, weight profiles

pub mod budget;
pub mod compat;
pub mod error;
pub mod harness;
pub mod io;
pub mod reliability;
pub mod rng;
pub mod sim;
pub mod trace;

pub use budget::{hit_ratio, BudgetConfig, BudgetState};
pub use compat::{
    drift_event, entropy_gap, mean_overlap, top_p_accept, topk_overlap, CompatConfig, MetricKind,
    TokenId, TopKSlice,
};
pub use error::{Error, Result};
pub use reliability::{
    cumulative_drift, effective_length, loss_weights, process_rollout, raw_reliability,
    scale_rewards, ReliabilityConfig, ReliabilityProfile,
};
pub use sim::{DriftScenario, TabularPolicy};
pub use trace::{PositionRecord, RewardTensor, RolloutTrace};

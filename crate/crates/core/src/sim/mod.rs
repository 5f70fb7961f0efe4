//! Tabular autoregressive student/teacher policies standing in for language
//! models: rollout sampling, distillation rewards and a policy-gradient trainer.

mod drift;
mod policy;
mod rollout;
mod train;

pub use drift::{build_drift_pair, DriftScenario};
pub use policy::{kl_divergence, reverse_kl, topk_of, topk_of_dist, TabularPolicy};
pub use rollout::{opd_reward, sample_rollout};
pub use train::{surrogate_gradient, surrogate_objective, train_step, ScoredRollout};

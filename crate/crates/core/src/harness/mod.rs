//! End-to-end experiments on the simulated student/teacher pair.

mod compare;
mod config;
mod profile;
mod replay;
mod run;

pub use compare::{compare, Comparison, ComparisonRow};
pub use config::{ExperimentConfig, Mode};
pub use profile::{emit_weight_profile, read_profile_dumps, WeightProfile};
pub use replay::replay_reduction;
pub use run::{
    load_config, run, ProfileDump, RunSummary, CONFIG_FILE, METRICS_FILE, METRICS_JSONL_FILE,
    PROFILE_FILE, SUMMARY_FILE, TRACES_FILE,
};

use crate::compat::CompatConfig;
use crate::error::{Error, Result};
use crate::reliability::{process_rollout, ReliabilityConfig};
use crate::trace::RolloutTrace;

/// Fraction of valid positions a reliability config would stop scoring on a
/// fixed trace set: `1 - sum(E) / sum(valid)`.
pub fn replay_reduction(
    traces: &[RolloutTrace],
    compat: &CompatConfig,
    reliability: &ReliabilityConfig,
) -> Result<f64> {
    let (mut kept, mut total) = (0usize, 0usize);
    for trace in traces {
        let (profile, _) = process_rollout(trace, compat, reliability)?;
        kept += profile.effective_length;
        total += trace.valid_count();
    }
    if total == 0 {
        return Err(Error::EmptyInput("replay over traces with no valid positions".into()));
    }
    Ok(1.0 - kept as f64 / total as f64)
}

//! Cumulative reliability weights and reward scaling.
//!
//! Drift events accumulate along a response into a count `C`. The raw
//! reliability `R = clip(1 - w_drop * C, 0, 1)` never recovers once it falls,
//! the applied loss weight is `L = R + w_base` on valid positions (zero on
//! padding), and every candidate reward at a position is multiplied by that
//! position's `L`. The effective length counts positions with `R > epsilon`,
//! so the base floor never counts as reliable length.

use serde::{Deserialize, Serialize};

use crate::compat::{drift_event, CompatConfig};
use crate::error::{Error, Result};
use crate::trace::{RewardTensor, RolloutTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReliabilityConfig {
    pub w_drop: f64,
    pub w_base: f64,
    pub epsilon: f64,
    pub enabled: bool,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        Self {
            w_drop: 0.01,
            w_base: 0.5,
            epsilon: 1e-6,
            enabled: true,
        }
    }
}

impl ReliabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_drop >= 0.0 && self.w_drop.is_finite()) {
            return Err(Error::config(format!("reliability.w_drop = {} must be >= 0", self.w_drop)));
        }
        if !(self.w_base >= 0.0 && self.w_base.is_finite()) {
            return Err(Error::config(format!("reliability.w_base = {} must be >= 0", self.w_base)));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::config(format!(
                "reliability.epsilon = {} not in [0, 1)",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-position reliability state of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityProfile {
    pub events: Vec<bool>,
    pub cumulative: Vec<u32>,
    pub raw: Vec<f64>,
    pub loss_weight: Vec<f64>,
    pub effective_length: usize,
    pub valid_mask: Vec<bool>,
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::record(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

/// Running count of drift events.
pub fn cumulative_drift(events: &[bool]) -> Vec<u32> {
    events
        .iter()
        .scan(0u32, |count, &e| {
            *count += u32::from(e);
            Some(*count)
        })
        .collect()
}

/// `clip(1 - w_drop * C, 0, 1)` on valid positions, exactly zero on padding.
pub fn raw_reliability(cumulative: &[u32], w_drop: f64, valid_mask: &[bool]) -> Result<Vec<f64>> {
    if w_drop.is_nan() || w_drop < 0.0 {
        return Err(Error::config(format!("w_drop = {w_drop} must be >= 0")));
    }
    check_len("valid mask", valid_mask.len(), cumulative.len())?;
    Ok(cumulative
        .iter()
        .zip(valid_mask)
        .map(|(&c, &valid)| {
            if valid {
                (1.0 - w_drop * f64::from(c)).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect())
}

/// `R + w_base` on valid positions, zero on padding.
pub fn loss_weights(raw: &[f64], w_base: f64, valid_mask: &[bool]) -> Result<Vec<f64>> {
    check_len("valid mask", valid_mask.len(), raw.len())?;
    if let Some(r) = raw.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::record(format!("raw reliability {r} outside [0, 1]")));
    }
    Ok(raw
        .iter()
        .zip(valid_mask)
        .map(|(&r, &valid)| if valid { r + w_base } else { 0.0 })
        .collect())
}

/// Multiplies every candidate reward in row `t` by `loss_weight[t]`.
pub fn scale_rewards(rewards: &RewardTensor, loss_weight: &[f64]) -> Result<RewardTensor> {
    check_len("loss weight", loss_weight.len(), rewards.rows())?;
    let mut out = rewards.clone();
    for (t, &w) in loss_weight.iter().enumerate() {
        for v in out.row_mut(t) {
            *v *= w;
        }
    }
    Ok(out)
}

/// Number of positions whose raw reliability is strictly above `epsilon`.
pub fn effective_length(raw: &[f64], epsilon: f64) -> usize {
    raw.iter().filter(|&&r| r > epsilon).count()
}

/// Drift events for every position; padding never drifts.
pub fn drift_events(trace: &RolloutTrace, compat: &CompatConfig) -> Result<Vec<bool>> {
    trace
        .records
        .iter()
        .map(|r| {
            if r.valid {
                drift_event(&r.student, &r.teacher, r.sampled_token, compat)
            } else {
                Ok(false)
            }
        })
        .collect()
}

/// Full per-rollout pass: events, reliability profile and scaled rewards.
///
/// With `rel.enabled == false` the profile is still computed for diagnostics
/// but the returned rewards are an untouched copy of the input.
pub fn process_rollout(
    trace: &RolloutTrace,
    compat: &CompatConfig,
    rel: &ReliabilityConfig,
) -> Result<(ReliabilityProfile, RewardTensor)> {
    compat.validate()?;
    rel.validate()?;
    trace.validate()?;
    let valid_mask = trace.valid_mask();
    let events = drift_events(trace, compat)?;
    let cumulative = cumulative_drift(&events);
    let raw = raw_reliability(&cumulative, rel.w_drop, &valid_mask)?;
    let loss_weight = loss_weights(&raw, rel.w_base, &valid_mask)?;
    let scaled = if rel.enabled {
        scale_rewards(&trace.rewards, &loss_weight)?
    } else {
        trace.rewards.clone()
    };
    let effective_length = effective_length(&raw, rel.epsilon);
    Ok((
        ReliabilityProfile {
            events,
            cumulative,
            raw,
            loss_weight,
            effective_length,
            valid_mask,
        },
        scaled,
    ))
}

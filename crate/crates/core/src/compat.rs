//! Per-position student/teacher compatibility signals.
//!
//! Every function here is pure. Slices are validated once at construction, so
//! the metric functions only re-check what depends on their other arguments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::RolloutTrace;

/// Vocabulary index.
pub type TokenId = u32;

/// Slack allowed when checking that a slice's mass does not exceed one.
const MASS_SLACK: f64 = 1e-9;

/// A model's returned top-k candidates: ids with their probabilities, sorted by
/// probability (non-increasing).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TopKSlice {
    ids: Vec<TokenId>,
    probs: Vec<f64>,
}

impl TopKSlice {
    pub fn new(ids: Vec<TokenId>, probs: Vec<f64>) -> Result<Self> {
        if ids.len() != probs.len() {
            return Err(Error::record(format!(
                "top-k slice has {} ids but {} probabilities",
                ids.len(),
                probs.len()
            )));
        }
        let mut seen = ids.clone();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::record(format!("duplicate token id {} in top-k slice", w[0])));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::record(format!("probability {p} at rank {i} outside (0, 1]")));
            }
        }
        if let Some(i) = probs.windows(2).position(|w| w[1] > w[0]) {
            return Err(Error::record(format!(
                "probabilities not sorted non-increasing at rank {}",
                i + 1
            )));
        }
        let mass: f64 = probs.iter().sum();
        if mass > 1.0 + MASS_SLACK {
            return Err(Error::record(format!("top-k mass {mass} exceeds 1")));
        }
        Ok(Self { ids, probs })
    }

    /// The slice carried by padding positions.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.ids.contains(&token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    OverlapRatio,
    TeacherTopPAccept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompatConfig {
    pub metric: MetricKind,
    /// Overlap threshold; a position drifts when its overlap is strictly below it.
    pub gamma: f64,
    /// Nucleus mass for the top-p acceptance metric.
    pub p: f64,
    pub k: usize,
}

impl Default for CompatConfig {
    fn default() -> Self {
        Self {
            metric: MetricKind::OverlapRatio,
            gamma: 0.7,
            p: 0.95,
            k: 16,
        }
    }
}

impl CompatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("compat.gamma = {} not in [0, 1]", self.gamma)));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::config(format!("compat.p = {} not in (0, 1]", self.p)));
        }
        if self.k == 0 {
            return Err(Error::config("compat.k must be at least 1"));
        }
        Ok(())
    }
}

/// Fraction of the `k` requested candidates shared by both slices.
pub fn topk_overlap(student: &TopKSlice, teacher: &TopKSlice, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("overlap requires k >= 1"));
    }
    let mut a = student.ids.clone();
    let mut b = teacher.ids.clone();
    a.sort_unstable();
    b.sort_unstable();
    let (mut i, mut j, mut shared) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(shared as f64 / k as f64)
}

/// Whether `sampled` lies inside the teacher's visible nucleus at mass `p`.
///
/// The nucleus is the shortest prefix of the sorted teacher slice whose
/// cumulative mass reaches `p`. When the whole slice carries less than `p`,
/// the true nucleus extends past what was returned and the full slice is used.
pub fn top_p_accept(sampled: TokenId, teacher: &TopKSlice, p: f64) -> Result<bool> {
    if teacher.is_empty() {
        return Err(Error::record("top-p acceptance on an empty teacher slice"));
    }
    let mut cumulative = 0.0;
    for (&id, &q) in teacher.ids.iter().zip(&teacher.probs) {
        if id == sampled {
            return Ok(true);
        }
        cumulative += q;
        if cumulative >= p {
            return Ok(false);
        }
    }
    Ok(false)
}

/// Prefix-drift indicator for one position under the configured metric.
pub fn drift_event(
    student: &TopKSlice,
    teacher: &TopKSlice,
    sampled: TokenId,
    cfg: &CompatConfig,
) -> Result<bool> {
    match cfg.metric {
        MetricKind::OverlapRatio => Ok(topk_overlap(student, teacher, cfg.k)? < cfg.gamma),
        MetricKind::TeacherTopPAccept => Ok(!top_p_accept(sampled, teacher, cfg.p)?),
    }
}

/// Entropy (nats) of the slice's mass renormalized to one.
///
/// Only top-k mass is observable, so this is an approximation of the
/// full-vocabulary entropy.
fn renormalized_entropy(slice: &TopKSlice) -> Result<f64> {
    let mass = slice.mass();
    if mass <= 0.0 {
        return Err(Error::record("entropy of a slice with zero mass"));
    }
    Ok(slice
        .probs
        .iter()
        .map(|&p| p / mass)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum())
}

/// |H(teacher) - H(student)| over renormalized top-k masses.
pub fn entropy_gap(student: &TopKSlice, teacher: &TopKSlice) -> Result<f64> {
    Ok((renormalized_entropy(teacher)? - renormalized_entropy(student)?).abs())
}

/// Mean per-position overlap over every valid position of every trace.
pub fn mean_overlap(traces: &[RolloutTrace], k: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for trace in traces {
        for record in trace.records.iter().filter(|r| r.valid) {
            total += topk_overlap(&record.student, &record.teacher, k)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no valid positions to average overlap over".into()));
    }
    Ok(total / count as f64)
}

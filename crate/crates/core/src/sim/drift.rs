use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::TabularPolicy;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Synthetic student/teacher pair with a scheduled top-k overlap per response
/// position.
///
/// The student is an order-1 table whose rows change every `band_width`
/// response positions. The teacher resolves every response position on its
/// own and, at position `t`, keeps the student's top `round(k * target(t))`
/// candidates while trading the remaining top-k slots with tokens from outside
/// the student's top-k (chosen afresh per position and history). Its logits are
/// then multiplied by `teacher_sharpness`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftScenario {
    pub seed: u64,
    pub prompt_length: usize,
    pub max_length: usize,
    pub k: usize,
    pub vocab_size: usize,
    /// Student position-band width, in response tokens.
    pub band_width: usize,
    /// Piecewise-constant target overlap: `(first response position, target)`.
    pub curve: Vec<(usize, f64)>,
    /// Student logits are drawn uniformly from `[-logit_scale, logit_scale]`.
    pub logit_scale: f64,
    pub teacher_sharpness: f64,
}

impl Default for DriftScenario {
    fn default() -> Self {
        Self::collapse()
    }
}

impl DriftScenario {
    /// Overlap near 0.95 that collapses to about 0.3 at response position 64.
    pub fn collapse() -> Self {
        Self {
            seed: 17,
            prompt_length: 4,
            max_length: 256,
            k: 16,
            vocab_size: 48,
            band_width: 32,
            curve: vec![(0, 0.95), (64, 0.3)],
            logit_scale: 3.0,
            teacher_sharpness: 1.5,
        }
    }

    /// Constant overlap around 0.94.
    pub fn high_compat() -> Self {
        Self {
            curve: vec![(0, 0.94)],
            ..Self::collapse()
        }
    }

    /// Teacher equals the student up to logit scaling everywhere.
    pub fn no_drift() -> Self {
        Self {
            curve: vec![(0, 1.0)],
            ..Self::collapse()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "collapse" => Some(Self::collapse()),
            "high_compat" => Some(Self::high_compat()),
            "no_drift" => Some(Self::no_drift()),
            _ => None,
        }
    }

    pub fn target_at(&self, position: usize) -> f64 {
        self.curve
            .iter()
            .take_while(|(start, _)| *start <= position)
            .last()
            .map_or(1.0, |&(_, t)| t)
    }

    /// Number of shared top-k candidates at a response position.
    pub fn shared_at(&self, position: usize) -> usize {
        (self.k as f64 * self.target_at(position)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.vocab_size {
            return Err(Error::config(format!(
                "scenario.k = {} must be in [1, vocab_size = {}]",
                self.k, self.vocab_size
            )));
        }
        if self.prompt_length == 0 || self.max_length == 0 || self.band_width == 0 {
            return Err(Error::config(
                "scenario prompt_length, max_length and band_width must be positive",
            ));
        }
        if self.curve.first().map(|c| c.0) != Some(0) {
            return Err(Error::config("scenario.curve must start at position 0"));
        }
        if self.curve.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::config("scenario.curve positions must be increasing"));
        }
        if let Some((pos, t)) = self.curve.iter().find(|(_, t)| !(0.0..=1.0).contains(t)) {
            return Err(Error::config(format!(
                "scenario.curve target {t} at position {pos} outside [0, 1]"
            )));
        }
        let outside = self.vocab_size - self.k;
        for &(pos, _) in &self.curve {
            let swaps = self.k - self.shared_at(pos);
            if swaps > outside {
                return Err(Error::config(format!(
                    "scenario.curve at position {pos} needs {swaps} tokens outside the student top-k \
                     but vocab_size - k = {outside}"
                )));
            }
        }
        if !(self.logit_scale >= 0.0 && self.teacher_sharpness > 0.0) {
            return Err(Error::config(
                "scenario.logit_scale must be >= 0 and teacher_sharpness > 0",
            ));
        }
        Ok(())
    }

    fn student_band_starts(&self) -> Vec<usize> {
        let mut starts = vec![0];
        starts.extend(
            (1..)
                .map(|b| self.prompt_length + b * self.band_width)
                .take_while(|&s| s < self.prompt_length + self.max_length),
        );
        starts
    }

    /// One teacher band per response position.
    fn teacher_band_starts(&self) -> Vec<usize> {
        let mut starts = vec![0];
        starts.extend((1..self.max_length).map(|t| self.prompt_length + t));
        starts
    }
}

pub fn build_drift_pair(scenario: &DriftScenario) -> Result<(TabularPolicy, TabularPolicy)> {
    scenario.validate()?;
    let vocab = scenario.vocab_size;
    let k = scenario.k;
    let mut rng = stream_rng(scenario.seed, Stream::Scenario, &[]);

    let student = TabularPolicy::new(vocab, 1, scenario.student_band_starts(), 1.0)?;
    let n = student.logits().len();
    let a = scenario.logit_scale;
    let student = student.with_logits(
        (0..n)
            .map(|_| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 })
            .collect(),
    )?;

    let mut teacher = TabularPolicy::new(vocab, 1, scenario.teacher_band_starts(), 1.0)?;
    for position in 0..scenario.max_length {
        let prefix_len = scenario.prompt_length + position;
        let shared = scenario.shared_at(position);
        let student_band = student.band_of(prefix_len);
        let teacher_band = teacher.band_of(prefix_len);
        for prev in 0..vocab {
            let z = student.context_logits(student_band * vocab + prev);
            let mut order: Vec<usize> = (0..vocab).collect();
            order.sort_by(|&x, &y| z[y].total_cmp(&z[x]).then(x.cmp(&y)));
            let mut y = z.to_vec();
            let picks = index::sample(&mut rng, vocab - k, k - shared);
            let mut outside: Vec<usize> = picks.iter().map(|i| order[k + i]).collect();
            outside.sort_unstable();
            for (&displaced, &incoming) in order[shared..k].iter().zip(&outside) {
                y.swap(displaced, incoming);
            }
            for (dst, v) in teacher
                .context_logits_mut(teacher_band * vocab + prev)
                .iter_mut()
                .zip(y)
            {
                *dst = scenario.teacher_sharpness * v;
            }
        }
    }
    Ok((student, teacher))
}

//! Rollout containers shared by the metric, reliability, simulation and I/O layers.

use crate::compat::{TokenId, TopKSlice};
use crate::error::{Error, Result};

/// Dense `[T, k]` per-position, per-candidate reward matrix (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTensor {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl RewardTensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            values: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::record(format!(
                    "reward row {t} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::record(format!("non-finite reward {v} in row {t}")));
            }
            values.extend_from_slice(row);
        }
        Ok(Self {
            values,
            rows: rows.len(),
            cols,
        })
    }

    /// Response length T.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Candidate count k.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.cols..(t + 1) * self.cols]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.values[t * self.cols..(t + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics
        self.values.chunks_exact(self.cols.max(1)).take(self.rows)
    }
}

/// One response position: both models' top-k on the shared prefix plus the sampled token.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionRecord {
    pub student: TopKSlice,
    pub teacher: TopKSlice,
    pub sampled_token: TokenId,
    /// False for padding.
    pub valid: bool,
}

impl PositionRecord {
    pub fn padding() -> Self {
        Self {
            student: TopKSlice::empty(),
            teacher: TopKSlice::empty(),
            sampled_token: 0,
            valid: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace {
    pub prompt: Vec<TokenId>,
    pub records: Vec<PositionRecord>,
    pub rewards: RewardTensor,
}

impl RolloutTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn response(&self) -> Vec<TokenId> {
        self.records.iter().map(|r| r.sampled_token).collect()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.valid).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.records.iter().filter(|r| r.valid).count()
    }

    /// Checks the shape invariants: one reward row per record, valid records
    /// carry exactly `rewards.cols()` student candidates.
    pub fn validate(&self) -> Result<()> {
        if self.rewards.rows() != self.records.len() {
            return Err(Error::record(format!(
                "trace has {} records but {} reward rows",
                self.records.len(),
                self.rewards.rows()
            )));
        }
        let k = self.rewards.cols();
        for (t, r) in self.records.iter().enumerate().filter(|(_, r)| r.valid) {
            if r.student.len() != k || r.teacher.len() != k {
                return Err(Error::record(format!(
                    "position {t}: expected {k} candidates, got student {} / teacher {}",
                    r.student.len(),
                    r.teacher.len()
                )));
            }
        }
        Ok(())
    }
}

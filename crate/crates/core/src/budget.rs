//! Batch-global response-length controller.
//!
//! After each step the controller looks at how many rollouts reached the
//! current budget with reliable tokens (the hit ratio). A high hit ratio grows
//! the budget by one step immediately; a low one must persist for `patience`
//! consecutive steps before the budget shrinks by one step. Both moves reset
//! the low-hit streak and are clamped to `[m_min, m_max]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    pub m_init: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub delta: usize,
    pub margin: usize,
    pub rho: f64,
    pub patience: u32,
    /// Holds the budget at its current value; used for controls.
    pub frozen: bool,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            m_init: 2048,
            m_min: 1024,
            m_max: 12288,
            delta: 100,
            margin: 100,
            rho: 0.1,
            patience: 3,
            frozen: false,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.m_min <= self.m_init && self.m_init <= self.m_max) {
            return Err(Error::config(format!(
                "budget requires m_min <= m_init <= m_max, got {} / {} / {}",
                self.m_min, self.m_init, self.m_max
            )));
        }
        if self.delta == 0 {
            return Err(Error::config("budget.delta must be positive"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config(format!("budget.rho = {} not in [0, 1]", self.rho)));
        }
        if self.patience == 0 {
            return Err(Error::config("budget.patience must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetState {
    pub m_current: usize,
    pub low_hit_streak: u32,
    pub step_index: u64,
}

impl BudgetState {
    pub fn init(cfg: &BudgetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            m_current: cfg.m_init,
            low_hit_streak: 0,
            step_index: 0,
        })
    }

    /// Successor state after observing hit ratio `h`.
    pub fn step(self, h: f64, cfg: &BudgetConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&h) {
            return Err(Error::record(format!("hit ratio {h} not in [0, 1]")));
        }
        let mut next = Self {
            step_index: self.step_index + 1,
            ..self
        };
        if h >= cfg.rho {
            next.m_current = (self.m_current + cfg.delta).min(cfg.m_max);
            next.low_hit_streak = 0;
        } else {
            next.low_hit_streak += 1;
            if next.low_hit_streak >= cfg.patience {
                next.m_current = self.m_current.saturating_sub(cfg.delta).max(cfg.m_min);
                next.low_hit_streak = 0;
            }
        }
        Ok(next)
    }
}

/// Fraction of rollouts whose effective length reaches `m_current - margin`.
pub fn hit_ratio(effective_lengths: &[usize], m_current: usize, margin: usize) -> Result<f64> {
    if effective_lengths.is_empty() {
        return Err(Error::EmptyInput("hit ratio of an empty batch".into()));
    }
    let target = m_current.saturating_sub(margin);
    let hits = effective_lengths.iter().filter(|&&e| e >= target).count();
    Ok(hits as f64 / effective_lengths.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn init_examples() {
        let cfg = BudgetConfig::default();
        assert_eq!(
            BudgetState::init(&cfg).unwrap(),
            BudgetState {
                m_current: 2048,
                low_hit_streak: 0,
                step_index: 0
            }
        );
        let high = BudgetConfig {
            m_init: 6144,
            ..cfg.clone()
        };
        assert_eq!(BudgetState::init(&high).unwrap().m_current, 6144);
        let bad = BudgetConfig { m_init: 512, ..cfg };
        assert!(matches!(BudgetState::init(&bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn hit_ratio_examples() {
        // 1900 < 2048 - 100, so only one of four hits.
        assert_eq!(hit_ratio(&[2048, 1900, 500, 100], 2048, 100).unwrap(), 0.25);
        assert_eq!(hit_ratio(&[2048, 1948, 500, 100], 2048, 100).unwrap(), 0.5);
        assert_eq!(hit_ratio(&[7, 7, 7], 7, 100).unwrap(), 1.0);
        assert_eq!(hit_ratio(&[0, 0], 2048, 100).unwrap(), 0.0);
        assert!(matches!(hit_ratio(&[], 10, 1), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn expand_contract_clamp() {
        let cfg = BudgetConfig::default();
        let s = BudgetState::init(&cfg).unwrap();
        let up = s.step(0.2, &cfg).unwrap();
        assert_eq!((up.m_current, up.low_hit_streak, up.step_index), (2148, 0, 1));

        let mut s = BudgetState::init(&cfg).unwrap();
        for expected_streak in [1, 2] {
            s = s.step(0.0, &cfg).unwrap();
            assert_eq!((s.m_current, s.low_hit_streak), (2048, expected_streak));
        }
        s = s.step(0.0, &cfg).unwrap();
        assert_eq!((s.m_current, s.low_hit_streak), (1948, 0));

        let top = BudgetState {
            m_current: 12288,
            low_hit_streak: 0,
            step_index: 5,
        };
        assert_eq!(top.step(0.5, &cfg).unwrap().m_current, 12288);

        let floor = BudgetState {
            m_current: 1024,
            low_hit_streak: 2,
            step_index: 5,
        };
        let s = floor.step(0.0, &cfg).unwrap();
        assert_eq!((s.m_current, s.low_hit_streak), (1024, 0));
    }

    #[test]
    fn expansion_clears_partial_streak() {
        let cfg = BudgetConfig::default();
        let s = BudgetState::init(&cfg).unwrap();
        let s = s.step(0.0, &cfg).unwrap().step(0.0, &cfg).unwrap();
        assert_eq!(s.low_hit_streak, 2);
        let s = s.step(0.1, &cfg).unwrap();
        assert_eq!((s.m_current, s.low_hit_streak), (2148, 0));
    }

    #[test]
    fn high_compatibility_reaches_max_in_ceil_steps() {
        // Hand recurrence: 2048 -> 2148 -> ... ; (12288 - 2048) / 100 = 102.4 -> 103 steps.
        let cfg = BudgetConfig::default();
        let mut s = BudgetState::init(&cfg).unwrap();
        let mut steps = 0;
        while s.m_current < cfg.m_max {
            let e = vec![s.m_current - cfg.margin; 4];
            let h = hit_ratio(&e, s.m_current, cfg.margin).unwrap();
            let next = s.step(h, &cfg).unwrap();
            assert!(next.m_current > s.m_current);
            s = next;
            steps += 1;
        }
        assert_eq!(steps, 103);
    }

    proptest! {
        #[test]
        fn invariants_hold(hs in prop::collection::vec(0.0f64..=1.0, 1..300)) {
            let cfg = BudgetConfig::default();
            let mut s = BudgetState::init(&cfg).unwrap();
            let mut lows_since_contraction = 0u32;
            for h in hs {
                let next = s.step(h, &cfg).unwrap();
                prop_assert!(cfg.m_min <= next.m_current && next.m_current <= cfg.m_max);
                prop_assert_eq!(next, s.step(h, &cfg).unwrap());
                if next.m_current != s.m_current {
                    prop_assert_eq!(next.low_hit_streak, 0);
                }
                if h < cfg.rho { lows_since_contraction += 1 } else { lows_since_contraction = 0 }
                if next.m_current < s.m_current {
                    prop_assert!(lows_since_contraction >= cfg.patience);
                    lows_since_contraction = 0;
                }
                prop_assert!(next.low_hit_streak < cfg.patience);
                s = next;
            }
        }
    }
}

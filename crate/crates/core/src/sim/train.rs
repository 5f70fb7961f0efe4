use super::policy::TabularPolicy;
use crate::compat::TokenId;
use crate::error::{Error, Result};
use crate::trace::{RewardTensor, RolloutTrace};

/// A rollout paired with the (possibly reliability-scaled) rewards used as
/// per-candidate advantages.
#[derive(Debug, Clone, Copy)]
pub struct ScoredRollout<'a> {
    pub trace: &'a RolloutTrace,
    pub rewards: &'a RewardTensor,
}

/// Visits every valid position with a nonzero reward row, passing the table row
/// of its prefix, the candidate ids and their advantages.
fn for_each_scored<F>(student: &TabularPolicy, batch: &[ScoredRollout<'_>], mut f: F) -> Result<usize>
where
    F: FnMut(usize, &[TokenId], &[f64]),
{
    let mut valid = 0;
    for (b, item) in batch.iter().enumerate() {
        let trace = item.trace;
        let k = item.rewards.cols();
        if item.rewards.rows() != trace.len() {
            return Err(Error::record(format!(
                "rollout {b}: {} reward rows for {} positions",
                item.rewards.rows(),
                trace.len()
            )));
        }
        let mut prefix = trace.prompt.clone();
        for (t, record) in trace.records.iter().enumerate() {
            if record.valid {
                valid += 1;
                if record.student.len() != k {
                    return Err(Error::record(format!(
                        "rollout {b} position {t}: {} candidates, reward row has {k}",
                        record.student.len()
                    )));
                }
                let row = item.rewards.row(t);
                if row.iter().any(|&a| a != 0.0) {
                    f(student.context_index(&prefix)?, record.student.ids(), row);
                }
            }
            prefix.push(record.sampled_token);
        }
    }
    Ok(valid)
}

/// Token-mean surrogate `sum r * ln p(candidate | prefix) / N_valid`, with the
/// rewards held fixed.
pub fn surrogate_objective(student: &TabularPolicy, batch: &[ScoredRollout<'_>]) -> Result<f64> {
    let mut total = 0.0;
    let valid = for_each_scored(student, batch, |ctx, ids, adv| {
        let p = student.context_dist(ctx);
        total += ids.iter().zip(adv).map(|(&v, &a)| a * p[v as usize].ln()).sum::<f64>();
    })?;
    Ok(if valid == 0 { 0.0 } else { total / valid as f64 })
}

/// Gradient of [`surrogate_objective`] with respect to the student logits.
pub fn surrogate_gradient(student: &TabularPolicy, batch: &[ScoredRollout<'_>]) -> Result<Vec<f64>> {
    let vocab = student.vocab_size();
    let inv_temp = 1.0 / student.temperature();
    let mut grad = vec![0.0; student.logits().len()];
    let valid = for_each_scored(student, batch, |ctx, ids, adv| {
        let p = student.context_dist(ctx);
        let g = &mut grad[ctx * vocab..(ctx + 1) * vocab];
        // d ln p_v / d z_i = (1[i = v] - p_i) / T
        let adv_sum: f64 = adv.iter().sum();
        for (gi, &pi) in g.iter_mut().zip(&p) {
            *gi -= adv_sum * pi * inv_temp;
        }
        for (&v, &a) in ids.iter().zip(adv) {
            g[v as usize] += a * inv_temp;
        }
    })?;
    if valid > 0 {
        let scale = 1.0 / valid as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    Ok(grad)
}

/// One ascent step on the surrogate: `logits += learning_rate * grad`.
pub fn train_step(
    student: &mut TabularPolicy,
    batch: &[ScoredRollout<'_>],
    learning_rate: f64,
) -> Result<()> {
    let grad = surrogate_gradient(student, batch)?;
    for (z, g) in student.logits_mut().iter_mut().zip(grad) {
        *z += learning_rate * g;
    }
    Ok(())
}

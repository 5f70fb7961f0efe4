use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::policy::{topk_of_dist, TabularPolicy};
use crate::compat::{TokenId, TopKSlice};
use crate::error::{Error, Result};
use crate::trace::{PositionRecord, RewardTensor, RolloutTrace};

/// Distillation reward over the student's top-k candidates.
///
/// Each candidate gets the teacher/student log-ratio weighted by the student's
/// probability renormalized over the top-k.
pub fn opd_reward(student: &TopKSlice, teacher_logprobs: &[f64]) -> Result<Vec<f64>> {
    if teacher_logprobs.len() != student.len() {
        return Err(Error::record(format!(
            "{} teacher log-probabilities for {} student candidates",
            teacher_logprobs.len(),
            student.len()
        )));
    }
    if let Some(lq) = teacher_logprobs.iter().find(|lq| !lq.is_finite()) {
        return Err(Error::record(format!("non-finite teacher log-probability {lq}")));
    }
    let mass = student.mass();
    Ok(student
        .probs()
        .iter()
        .zip(teacher_logprobs)
        .map(|(&p, &lq)| (p / mass) * (lq - p.ln()))
        .collect())
}

/// Samples one response from the student, recording both models' top-k and
/// the distillation reward row at every position of the shared prefix.
pub fn sample_rollout(
    student: &TabularPolicy,
    teacher: &TabularPolicy,
    prompt: &[TokenId],
    max_length: usize,
    k: usize,
    seed: u64,
) -> Result<RolloutTrace> {
    if max_length == 0 {
        return Err(Error::config("max_length must be at least 1"));
    }
    if student.vocab_size() != teacher.vocab_size() {
        return Err(Error::config("student and teacher vocabularies differ"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prefix = prompt.to_vec();
    let mut records = Vec::with_capacity(max_length);
    let mut rows = Vec::with_capacity(max_length);
    for _ in 0..max_length {
        let p = student.next_dist(&prefix)?;
        let q = teacher.next_dist(&prefix)?;
        let student_slice = topk_of_dist(&p, k)?;
        let teacher_slice = topk_of_dist(&q, k)?;
        let teacher_lp: Vec<f64> = student_slice.ids().iter().map(|&v| q[v as usize].ln()).collect();
        rows.push(opd_reward(&student_slice, &teacher_lp)?);
        let sampled = WeightedIndex::new(&p)
            .map_err(|e| Error::record(format!("cannot sample from student: {e}")))?
            .sample(&mut rng) as TokenId;
        records.push(PositionRecord {
            student: student_slice,
            teacher: teacher_slice,
            sampled_token: sampled,
            valid: true,
        });
        prefix.push(sampled);
    }
    Ok(RolloutTrace {
        prompt: prompt.to_vec(),
        records,
        rewards: RewardTensor::from_rows(&rows, k)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compat::topk_overlap;
    use rand::Rng;

    fn random_policy(seed: u64) -> TabularPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pol = TabularPolicy::new(12, 1, vec![0, 6], 1.0).unwrap();
        let n = pol.logits().len();
        pol.with_logits((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn reward_zero_when_models_agree() {
        let s = TopKSlice::new(vec![3, 1], vec![0.6, 0.3]).unwrap();
        let row = opd_reward(&s, &[0.6f64.ln(), 0.3f64.ln()]).unwrap();
        assert!(row.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn reward_two_candidates() {
        let s = TopKSlice::new(vec![0, 1], vec![0.5, 0.5]).unwrap();
        let row = opd_reward(&s, &[0.8f64.ln(), 0.2f64.ln()]).unwrap();
        // scalar recomputation: 0.5 ln(0.8/0.5), 0.5 ln(0.2/0.5)
        assert!((row[0] - 0.5 * 1.6f64.ln()).abs() < 1e-15);
        assert!((row[1] - 0.5 * 0.4f64.ln()).abs() < 1e-15);
        assert!((row[0] - 0.2350018146).abs() < 1e-9);
        assert!((row[1] + 0.4581453659).abs() < 1e-9);
    }

    #[test]
    fn reward_rejects_bad_input() {
        let s = TopKSlice::new(vec![0, 1], vec![0.5, 0.5]).unwrap();
        assert!(opd_reward(&s, &[f64::NEG_INFINITY, 0.0]).is_err());
        assert!(opd_reward(&s, &[0.0]).is_err());
    }

    #[test]
    fn single_step_matches_next_dist() {
        let (s, t) = (random_policy(1), random_policy(2));
        let trace = sample_rollout(&s, &t, &[4, 5], 1, 4, 9).unwrap();
        assert_eq!(trace.len(), 1);
        let expected = topk_of_dist(&s.next_dist(&[4, 5]).unwrap(), 4).unwrap();
        assert_eq!(trace.records[0].student, expected);
    }

    #[test]
    fn deterministic_under_seed() {
        let (s, t) = (random_policy(1), random_policy(2));
        let a = sample_rollout(&s, &t, &[0], 20, 4, 5).unwrap();
        let b = sample_rollout(&s, &t, &[0], 20, 4, 5).unwrap();
        assert_eq!(a, b);
        let c = sample_rollout(&s, &t, &[0], 20, 4, 6).unwrap();
        assert_eq!(c.len(), a.len());
        assert_eq!(c.rewards.cols(), a.rewards.cols());
    }

    #[test]
    fn teacher_equal_student_full_overlap() {
        let s = random_policy(3);
        let trace = sample_rollout(&s, &s, &[1], 30, 5, 0).unwrap();
        for r in &trace.records {
            assert_eq!(topk_overlap(&r.student, &r.teacher, 5).unwrap(), 1.0);
        }
        assert!(trace.rewards.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_length_rejected() {
        let s = random_policy(3);
        assert!(sample_rollout(&s, &s, &[1], 0, 5, 0).is_err());
    }
}

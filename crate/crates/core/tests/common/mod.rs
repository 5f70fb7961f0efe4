//! Random trace generators and naive reference loops shared by the integration tests.
#![allow(dead_code)]

use prune_opd::sim::{sample_rollout, surrogate_gradient, surrogate_objective, ScoredRollout};
use prune_opd::{scale_rewards, PositionRecord, RewardTensor, RolloutTrace, TabularPolicy, TokenId, TopKSlice};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 64;

fn random_slice<R: Rng>(rng: &mut R, ids: Vec<TokenId>) -> TopKSlice {
    let mut probs: Vec<f64> = ids.iter().map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = probs.iter().sum();
    let mass = rng.gen_range(0.5..=1.0);
    probs.iter_mut().for_each(|p| *p = *p / total * mass);
    probs.sort_by(|a, b| b.total_cmp(a));
    TopKSlice::new(ids, probs).expect("generated slice is valid")
}

/// Random rollout with `len` positions, `k` candidates and an optional padded tail.
/// Teacher sets share a random number of ids with the student so overlaps span `[0, 1]`.
pub fn random_trace<R: Rng>(rng: &mut R, len: usize, k: usize, padded_tail: usize) -> RolloutTrace {
    let mut records = Vec::with_capacity(len);
    let mut rows = Vec::with_capacity(len);
    for t in 0..len {
        if t >= len - padded_tail.min(len) {
            records.push(PositionRecord::padding());
            rows.push(vec![0.0; k]);
            continue;
        }
        let pool: Vec<TokenId> = index::sample(rng, VOCAB, 2 * k).iter().map(|i| i as TokenId).collect();
        let student_ids = pool[..k].to_vec();
        let shared = rng.gen_range(0..=k);
        let mut teacher_ids = pool[..shared].to_vec();
        teacher_ids.extend_from_slice(&pool[k..2 * k - shared]);
        let student = random_slice(rng, student_ids.clone());
        let teacher = random_slice(rng, teacher_ids);
        records.push(PositionRecord {
            sampled_token: student_ids[0],
            student,
            teacher,
            valid: true,
        });
        rows.push((0..k).map(|_| rng.gen_range(-2.0..2.0)).collect());
    }
    RolloutTrace {
        prompt: vec![1, 2, 3],
        rewards: RewardTensor::from_rows(&rows, k).expect("finite rows"),
        records,
    }
}

/// Scalar reference: overlap by nested loops.
pub fn ref_overlap(s: &[TokenId], t: &[TokenId], k: usize) -> f64 {
    let mut n = 0;
    for a in s {
        for b in t {
            if a == b {
                n += 1;
            }
        }
    }
    n as f64 / k as f64
}

pub struct RefProfile {
    pub cumulative: Vec<u32>,
    pub raw: Vec<f64>,
    pub loss: Vec<f64>,
    pub scaled: Vec<Vec<f64>>,
    pub effective_length: usize,
}

/// Deliberately naive reimplementation of the reliability chain for the overlap metric.
#[allow(clippy::manual_clamp)]
pub fn ref_profile(trace: &RolloutTrace, gamma: f64, k: usize, w_drop: f64, w_base: f64, eps: f64) -> RefProfile {
    let n = trace.records.len();
    let mut out = RefProfile {
        cumulative: vec![0; n],
        raw: vec![0.0; n],
        loss: vec![0.0; n],
        scaled: vec![],
        effective_length: 0,
    };
    let mut count = 0u32;
    for t in 0..n {
        let r = &trace.records[t];
        if r.valid && ref_overlap(r.student.ids(), r.teacher.ids(), k) < gamma {
            count += 1;
        }
        out.cumulative[t] = count;
        if r.valid {
            let mut v = 1.0 - w_drop * count as f64;
            if v < 0.0 {
                v = 0.0;
            }
            if v > 1.0 {
                v = 1.0;
            }
            out.raw[t] = v;
            out.loss[t] = v + w_base;
        }
        if out.raw[t] > eps {
            out.effective_length += 1;
        }
        let row: Vec<f64> = trace.rewards.row(t).iter().map(|x| out.loss[t] * x).collect();
        out.scaled.push(row);
    }
    out
}

/// Reference controller written as a plain state machine.
pub struct RefController {
    pub m: usize,
    pub streak: u32,
}

impl RefController {
    pub fn feed(&mut self, h: f64) {
        let (m_min, m_max, delta, rho, patience) = (1024, 12288, 100, 0.1, 3);
        if h >= rho {
            self.m += delta;
            if self.m > m_max {
                self.m = m_max;
            }
            self.streak = 0;
        } else {
            self.streak += 1;
            if self.streak == patience {
                self.m = if self.m < m_min + delta { m_min } else { self.m - delta };
                self.streak = 0;
            }
        }
    }
}

fn random_policy<R: Rng>(rng: &mut R, vocab: usize, bands: Vec<usize>, t: f64) -> TabularPolicy {
    let p = TabularPolicy::new(vocab, 1, bands, t).unwrap();
    let n = p.logits().len();
    p.with_logits((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Normwise relative error of the analytic gradient against central differences.
pub fn gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = rng.gen_range(2..=8);
    let k = rng.gen_range(1..=vocab);
    let temperature = rng.gen_range(0.5..2.0);
    let student = random_policy(&mut rng, vocab, vec![0, 4], temperature);
    let teacher = random_policy(&mut rng, vocab, vec![0], 1.0);
    let traces: Vec<_> = (0..3)
        .map(|i| sample_rollout(&student, &teacher, &[0], 8, k, seed * 10 + i).unwrap())
        .collect();
    // Arbitrary per-position weights so the check covers scaled rewards too.
    let scaled: Vec<RewardTensor> = traces
        .iter()
        .map(|t| {
            let w: Vec<f64> = (0..t.len()).map(|_| rng.gen_range(0.0..1.5)).collect();
            scale_rewards(&t.rewards, &w).unwrap()
        })
        .collect();
    let batch: Vec<ScoredRollout<'_>> = traces
        .iter()
        .zip(&scaled)
        .map(|(trace, rewards)| ScoredRollout { trace, rewards })
        .collect();

    let analytic = surrogate_gradient(&student, &batch).unwrap();
    let h = 1e-5;
    let mut numeric = vec![0.0; analytic.len()];
    for (i, g) in numeric.iter_mut().enumerate() {
        let mut plus = student.clone();
        plus.logits_mut()[i] += h;
        let mut minus = student.clone();
        minus.logits_mut()[i] -= h;
        *g = (surrogate_objective(&plus, &batch).unwrap() - surrogate_objective(&minus, &batch).unwrap())
            / (2.0 * h);
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    diff / norm
}

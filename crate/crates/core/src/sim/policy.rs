use crate::compat::{TokenId, TopKSlice};
use crate::error::{Error, Result};

/// Softmax policy over a finite vocabulary whose context is the position band
/// of the prefix plus its last `context_order` tokens.
///
/// `band_starts` are prefix lengths at which a new band begins; the first is 0.
/// Logits are stored row-major as `[band][history][next token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab_size: usize,
    context_order: usize,
    band_starts: Vec<usize>,
    logits: Vec<f64>,
    temperature: f64,
}

impl TabularPolicy {
    /// All-zero logits (uniform next-token distribution everywhere).
    pub fn new(
        vocab_size: usize,
        context_order: usize,
        band_starts: Vec<usize>,
        temperature: f64,
    ) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::config("vocab_size must be positive"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config(format!("temperature {temperature} must be positive")));
        }
        if band_starts.first() != Some(&0) || band_starts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(
                "band starts must begin at 0 and be strictly increasing",
            ));
        }
        let histories = u32::try_from(context_order)
            .ok()
            .and_then(|o| vocab_size.checked_pow(o))
            .ok_or_else(|| Error::config("context table too large"))?;
        let size = band_starts.len() * histories * vocab_size;
        Ok(Self {
            vocab_size,
            context_order,
            band_starts,
            logits: vec![0.0; size],
            temperature,
        })
    }

    pub fn with_logits(mut self, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != self.logits.len() {
            return Err(Error::config(format!(
                "expected {} logits, got {}",
                self.logits.len(),
                logits.len()
            )));
        }
        self.logits = logits;
        Ok(self)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn band_starts(&self) -> &[usize] {
        &self.band_starts
    }

    pub fn num_contexts(&self) -> usize {
        self.logits.len() / self.vocab_size
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn context_logits(&self, context: usize) -> &[f64] {
        &self.logits[context * self.vocab_size..(context + 1) * self.vocab_size]
    }

    pub fn context_logits_mut(&mut self, context: usize) -> &mut [f64] {
        let v = self.vocab_size;
        &mut self.logits[context * v..(context + 1) * v]
    }

    pub fn band_of(&self, prefix_len: usize) -> usize {
        self.band_starts.partition_point(|&s| s <= prefix_len) - 1
    }

    /// Table row used for the next token after `prefix`. Histories shorter
    /// than the context order are left-padded with token 0.
    pub fn context_index(&self, prefix: &[TokenId]) -> Result<usize> {
        if let Some(&t) = prefix.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::record(format!(
                "token {t} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        let band = self.band_of(prefix.len());
        let tail = &prefix[prefix.len().saturating_sub(self.context_order)..];
        let pad = self.context_order - tail.len();
        let history = std::iter::repeat_n(0, pad)
            .chain(tail.iter().map(|&t| t as usize))
            .fold(0usize, |acc, t| acc * self.vocab_size + t);
        let histories = self.vocab_size.pow(self.context_order as u32);
        Ok(band * histories + history)
    }

    /// Next-token distribution at a table row.
    pub fn context_dist(&self, context: usize) -> Vec<f64> {
        softmax(self.context_logits(context), self.temperature)
    }

    pub fn next_dist(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.context_dist(self.context_index(prefix)?))
    }
}

pub(crate) fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z));
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// The `k` most probable tokens of a full distribution, ties broken by ascending id.
pub fn topk_of_dist(dist: &[f64], k: usize) -> Result<TopKSlice> {
    if k > dist.len() {
        return Err(Error::config(format!(
            "top-k of {k} exceeds vocabulary size {}",
            dist.len()
        )));
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    order.truncate(k);
    TopKSlice::new(
        order.iter().map(|&i| i as TokenId).collect(),
        order.iter().map(|&i| dist[i]).collect(),
    )
}

pub fn topk_of(policy: &TabularPolicy, prefix: &[TokenId], k: usize) -> Result<TopKSlice> {
    topk_of_dist(&policy.next_dist(prefix)?, k)
}

/// `sum_v p(v) (ln p(v) - ln q(v))`. Returns `f64::INFINITY` when `q` is zero
/// somewhere `p` is not.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&pv, &qv) in p.iter().zip(q) {
        if pv == 0.0 {
            continue;
        }
        if qv == 0.0 {
            return f64::INFINITY;
        }
        kl += pv * (pv.ln() - qv.ln());
    }
    kl.max(0.0)
}

/// Reverse KL from student to teacher at one prefix.
pub fn reverse_kl(student: &TabularPolicy, teacher: &TabularPolicy, prefix: &[TokenId]) -> Result<f64> {
    if student.vocab_size() != teacher.vocab_size() {
        return Err(Error::config("student and teacher vocabularies differ"));
    }
    Ok(kl_divergence(&student.next_dist(prefix)?, &teacher.next_dist(prefix)?))
}

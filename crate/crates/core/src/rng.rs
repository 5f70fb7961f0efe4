//! Deterministic per-purpose random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags; distinct purposes never share a stream.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Scenario = 1,
    Prompts = 2,
    Rollout = 3,
    Pruning = 4,
    Eval = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag and indices (step, rollout, ...).
pub fn derive_seed(seed: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

pub fn stream_rng(seed: u64, stream: Stream, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, indices))
}

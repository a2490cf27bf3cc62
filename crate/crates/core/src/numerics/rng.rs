//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the run seed and selected by a
//! 64-bit stream id (`rand_chacha` 0.9, pinned in the workspace manifest).
//! ChaCha output is defined bit-for-bit, so the same `(seed, stream_id, call
//! sequence)` yields the same draws on every platform. Gaussian draws go
//! through `rand_distr::StandardNormal`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Purpose tags mixed into stream ids so independent consumers never share
/// draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Spans = 2,
    Negatives = 3,
    Corpus = 4,
    Gumbel = 5,
    Dropout = 6,
    Noise = 7,
    Batch = 8,
    EvalNoise = 9,
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { seed, stream_id, inner }
    }

    /// Stream for `purpose`, further split by up to three small keys
    /// (split, index, step, ...).
    pub fn derive(seed: u64, purpose: Purpose, keys: &[u64]) -> Self {
        // splitmix64 fold keeps distinct key tuples on distinct streams.
        let mut id = (purpose as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for &k in keys {
            id ^= k
                .wrapping_add(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(id << 6)
                .wrapping_add(id >> 2);
            id = splitmix(id);
        }
        Self::new(seed, id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[lo, hi)`.
    pub fn below(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..hi)
    }

    /// Standard Gumbel draw `-ln(-ln u)`, with `u` kept away from 0 and 1.
    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().clamp(1e-12, 1.0 - 1e-12);
        -(-u.ln()).ln()
    }

    /// `k` distinct elements of `pool`, uniformly without replacement
    /// (partial Fisher-Yates).
    pub fn choose_distinct(&mut self, pool: &[usize], k: usize) -> Vec<usize> {
        let mut pool = pool.to_vec();
        let k = k.min(pool.len());
        for i in 0..k {
            let j = self.below(i, pool.len());
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

//! Counter-based splittable RNG.
//!
//! Training must be able to resume from a checkpoint and reproduce the exact stream it would
//! have drawn, so no RNG state is ever persisted: every consumer derives a fresh stream from
//! (seed, site name, indices). Substream derivation uses the *base* key, never the draw
//! counter, so the order in which substreams are opened does not matter.

/// splitmix64 output mixer. Passes through the full 64-bit state space bijectively.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a label, used to key substreams by site name.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug)]
pub struct Rng {
    base: u64,
    counter: u64,
}

impl Rng {
    pub fn seeded(seed: u64) -> Rng {
        Rng { base: mix(seed ^ GOLDEN), counter: 0 }
    }

    /// Derives an independent stream keyed by a site name, e.g. `"init"`, `"shuffle"`.
    pub fn substream(&self, label: &str) -> Rng {
        Rng { base: mix(self.base ^ label_hash(label)), counter: 0 }
    }

    /// Derives an independent stream keyed by an index (epoch, step, sample, ...).
    pub fn substream_idx(&self, idx: u64) -> Rng {
        Rng { base: mix(self.base ^ idx.wrapping_mul(GOLDEN).wrapping_add(0x1571_af93_d8f4_16c5)), counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.base.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). n must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection-free multiply-shift; bias is < 2^-53 for any desk-scale n.
        (self.uniform() * n as f64) as usize % n
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal(0, sigma) resampled until within `clip` sigmas (weight init convention).
    pub fn trunc_normal(&mut self, sigma: f64, clip: f64) -> f64 {
        loop {
            let v = self.normal();
            if v.abs() <= clip {
                return v * sigma;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// k distinct indices from [0, n), returned sorted. k must be <= n.
    pub fn choose(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(k);
        idx.sort_unstable();
        idx
    }
}

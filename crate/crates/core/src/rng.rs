//! Deterministic random number generation.
//!
//! Every stochastic stage of the pipeline draws from a named stream derived
//! from one global seed, so a run is fully reproducible from its config.
//! The generator is xoshiro256++ seeded through splitmix64; both algorithms
//! are fixed by construction and do not depend on any external crate, which
//! keeps byte-level reproducibility under our control across toolchains.

/// splitmix64 step; used for seeding and stream derivation.
#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `(seed, label)`.
///
/// The label is folded into the seed byte by byte through splitmix64, so
/// distinct labels yield statistically independent streams.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut s = seed ^ 0xA076_1D64_78BD_642F;
    let mut out = splitmix64(&mut s);
    for &b in label.as_bytes() {
        s ^= u64::from(b).wrapping_mul(0x100000001B3);
        out ^= splitmix64(&mut s);
    }
    out
}

/// Derive a child seed from `(seed, label, index)`, for per-item streams.
pub fn derive_seed_indexed(seed: u64, label: &str, index: u64) -> u64 {
    let mut s = derive_seed(seed, label) ^ index.wrapping_mul(0x9E3779B97F4A7C15);
    splitmix64(&mut s)
}

/// xoshiro256++ generator.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let mut s = [0u64; 4];
        for slot in &mut s {
            *slot = splitmix64(&mut sm);
        }
        Rng { s }
    }

    /// Stream for `(seed, label)`.
    pub fn stream(seed: u64, label: &str) -> Self {
        Rng::from_seed(derive_seed(seed, label))
    }

    /// Stream for `(seed, label, index)`.
    pub fn stream_indexed(seed: u64, label: &str, index: u64) -> Self {
        Rng::from_seed(derive_seed_indexed(seed, label, index))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let result = (self.s[0].wrapping_add(self.s[3]))
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform f32 in [0, 1).
    #[inline]
    pub fn uniform_f32(&mut self) -> f32 {
        ((self.next_u64() >> 40) as f32) * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform f64 in [0, 1).
    #[inline]
    pub fn uniform_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). n must be > 0.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // widening-multiply range reduction
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Uniform f64 in [lo, hi).
    #[inline]
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    /// Standard normal via Box-Muller (discards the second variate).
    pub fn normal_f64(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform_f64(); // (0, 1]
        let u2 = self.uniform_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// k distinct indices sampled uniformly from [0, n), in ascending order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} from {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        // partial Fisher-Yates: first k slots hold the sample
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx.sort_unstable();
        idx
    }
}

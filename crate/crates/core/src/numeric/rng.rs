//! Seedable, splittable random streams.
//!
//! A `Rng` is a 128-bit PCG multiplicative generator whose state is expanded
//! from a 64-bit seed by SplitMix64. Child streams are seeded from values
//! drawn off the parent, so a child never aliases its parent's state.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg64Mcg;

/// SplitMix64 step; used for seed expansion and stream derivation.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    inner: Pcg64Mcg,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let hi = splitmix64(&mut sm) as u128;
        let lo = splitmix64(&mut sm) as u128;
        Self {
            inner: Pcg64Mcg::new((hi << 64) | lo),
        }
    }

    /// Stream keyed by `(seed, tag)`; independent of the order in which
    /// other streams are created.
    pub fn derived(seed: u64, tag: u64) -> Self {
        let mut sm = tag ^ 0xA076_1D64_78BD_642F;
        let mixed = splitmix64(&mut sm);
        Self::new(seed ^ mixed.rotate_left(17))
    }

    /// Child stream; advances the parent by one draw.
    pub fn split(&mut self) -> Rng {
        let mut sm = self.inner.next_u64();
        Rng::new(splitmix64(&mut sm))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`. Panics when `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift with rejection.
        let n = n as u64;
        loop {
            let x = self.inner.next_u64();
            let m = (x as u128) * (n as u128);
            let low = m as u64;
            if low >= n.wrapping_neg() % n {
                return (m >> 64) as usize;
            }
        }
    }

    /// Fisher-Yates partial shuffle: `k` distinct indices from `0..n`.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

//! Project-wide deterministic random stream.
//!
//! The generator is Marsaglia's xorshift128 (`rand_xorshift::XorShiftRng`),
//! seeded from a 64-bit seed through `rand_core`'s PCG32-based
//! `seed_from_u64` expansion. One "draw" is one call to [`Rng::next_u64`],
//! which consumes two 32-bit xorshift outputs (low word first).
//!
//! Draw accounting per call site:
//! - [`Rng::next_f64`], [`Rng::below`], [`Rng::uniform`]: one draw.
//! - [`Rng::permutation`]: exactly `n - 1` draws.
//! - [`Rng::normal`]: one or more draws (ziggurat rejection).
//! - [`Rng::fork`]: no draws; derives an independent child stream from the
//!   seed alone.

use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xorshift::XorShiftRng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: XorShiftRng,
}

/// SplitMix64 finalizer, used only to derive child seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: XorShiftRng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for a named purpose; depends only on this
    /// stream's seed and `tag`, never on how much has been consumed.
    pub fn fork(&self, tag: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(tag)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Integer in [0, bound) by widening multiply; one draw, bias below
    /// bound / 2^64.
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Integer uniform on the closed range [-t, t].
    pub fn symmetric_int(&mut self, t: usize) -> i64 {
        self.below(2 * t + 1) as i64 - t as i64
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Fisher–Yates shuffle of `0..n`, walking `i` from `n-1` down to 1.
    pub fn permutation(&mut self, n: usize) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::Config("permutation of zero elements".into()));
        }
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        Ok(p)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

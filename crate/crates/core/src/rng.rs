//! Counter-based random number stream.
//!
//! Draw `k` of a stream is a pure function of `(seed, counter + k)`, so a
//! stream value can be copied and replayed — the finite-difference gradient
//! oracles rely on replaying the exact noise of a forward pass, and parallel
//! evaluation cannot reorder draws because there is no shared cursor.

use crate::precision::Real;

/// A splittable, addressable stream of random draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform in (0, 1]; never returns 0 so it is safe under `ln`.
#[inline]
fn to_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 1.0) * (1.0 / 9_007_199_254_740_992.0)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0 }
    }

    pub fn with_counter(seed: u64, counter: u64) -> Self {
        RngStream { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Derives an independent stream; used to give sweeps and layers their
    /// own disjoint randomness without coordinating counters.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream {
            seed: splitmix(self.seed ^ tag.wrapping_mul(GOLDEN).wrapping_add(0x5851_f42d_4c95_7f2d)),
            counter: 0,
        }
    }

    #[inline]
    fn raw_at(&self, k: u64) -> u64 {
        splitmix(
            self.seed
                .wrapping_add(self.counter.wrapping_add(k).wrapping_mul(GOLDEN)),
        )
    }

    /// Uniform draw in (0, 1] at offset `k`; does not advance the stream.
    #[inline]
    pub fn uniform_at(&self, k: u64) -> f64 {
        to_unit(self.raw_at(k))
    }

    /// Standard-normal draw at gaussian index `k` (each consumes two raw
    /// draws); does not advance the stream.
    #[inline]
    pub fn gauss_at(&self, k: u64) -> f64 {
        let u1 = to_unit(self.raw_at(2 * k));
        let u2 = to_unit(self.raw_at(2 * k + 1));
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Advances past `n` gaussian draws.
    pub fn skip_gauss(&mut self, n: u64) {
        self.counter = self.counter.wrapping_add(2 * n);
    }

    pub fn next_uniform(&mut self) -> f64 {
        let v = self.uniform_at(0);
        self.counter = self.counter.wrapping_add(1);
        v
    }

    pub fn next_gauss(&mut self) -> f64 {
        let v = self.gauss_at(0);
        self.counter = self.counter.wrapping_add(2);
        v
    }

    /// Uniform integer in `0..bound`.
    pub fn next_below(&mut self, bound: usize) -> usize {
        assert!(bound > 0);
        let v = self.next_uniform();
        // v in (0,1]; map so bound-1 is reached only at v == 1.
        ((v * bound as f64).ceil() as usize).saturating_sub(1).min(bound - 1)
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// `n` i.i.d. draws from N(0, sigma^2); advances `rng` past them.
///
/// The draw at index `j` depends only on `(seed, counter + 2j)`, so the fill
/// is parallelized over indices without changing any value.
pub fn gauss_sample<T: Real>(rng: &mut RngStream, n: usize, sigma: f64) -> Vec<T> {
    assert!(sigma > 0.0, "gauss_sample requires sigma > 0");
    let base = *rng;
    let out = crate::parallel::map_indexed(n, |j| T::from_f64(base.gauss_at(j as u64) * sigma));
    rng.skip_gauss(n as u64);
    out
}

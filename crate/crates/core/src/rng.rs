//! Deterministic, splittable pseudo-random numbers for reproducible
//! simulation runs.
//!
//! Streams are derived from a `(seed, domain, index)` key by hashing rather
//! than by advancing shared state, so replicates can be evaluated in any
//! order (or in parallel) and still produce identical draws.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// SplitMix64 generator (Vigna); non-cryptographic.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derives an independent stream for a `(seed, domain, index)` key.
    pub fn stream(seed: u64, domain: u64, index: u64) -> Self {
        let mut k = seed;
        k = mix(k ^ GOLDEN.wrapping_mul(domain.wrapping_add(1)));
        k = mix(k ^ GOLDEN.wrapping_mul(index.wrapping_add(1)));
        Self { state: k }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64) / DEN
    }

    /// Uniform on `(0, 1]`; safe as a logarithm argument.
    #[inline]
    fn next_open_f64(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        (((self.next_u64() >> 11) as f64) + 1.0) / DEN
    }

    /// Standard normal draw via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_open_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn next_bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}

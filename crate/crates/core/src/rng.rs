//! Counter-based random numbers for fault sampling.
//!
//! The generator is SplitMix64 evaluated in counter mode: draw `i` under key
//! `k` is the SplitMix64 output function applied to `k + (i + 1)·γ` with
//! `γ = 0x9E3779B97F4A7C15`. This equals the `i`-th output of a sequential
//! SplitMix64 stream seeded with `k`, so any language can reproduce a fault
//! mask from its key without replaying earlier draws. Uniform reals take the
//! top 53 bits: `u = (z >> 11) · 2⁻⁵³ ∈ [0, 1)`.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output (finalizer) function.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a base seed with indices (trial, layer, ...) into a new key:
/// `k₀ = mix64(base + γ)`, `kⱼ₊₁ = mix64(kⱼ ⊕ (partⱼ + 1)·γ)`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(base.wrapping_add(GAMMA)), |k, &p| {
        mix64(k ^ p.wrapping_add(1).wrapping_mul(GAMMA))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        CounterRng { key }
    }

    #[inline]
    pub fn u64_at(&self, counter: u64) -> u64 {
        mix64(
            self.key
                .wrapping_add(counter.wrapping_add(1).wrapping_mul(GAMMA)),
        )
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn uniform_at(&self, counter: u64) -> f64 {
        (self.u64_at(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

//! Deterministic pseudo-random numbers for weight generation and synthetic data.
//!
//! SplitMix64 is used everywhere randomness is needed: it is a tiny 64-bit
//! counter-based generator with published constants, so the same seed yields
//! the same stream on every platform. Floating-point draws are derived from
//! the integer stream by bit manipulation only (no transcendental functions),
//! which keeps generated weights and datasets bit-identical across libm
//! implementations.

/// SplitMix64 generator. State advances by the golden-ratio increment; each
/// output is a finalized mix of the state (Steele, Lea & Flood 2014).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_A: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_B: u64 = 0x94D0_49BB_1331_11EB;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_A);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_B);
    z ^ (z >> 31)
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derive an independent stream from a seed and two tag values.
    /// Used to give every (sample, trial) or (tensor, index) pair its own
    /// reproducible stream without coupling draw counts.
    pub fn substream(seed: u64, tag_a: u64, tag_b: u64) -> Self {
        let s = mix(seed ^ mix(tag_a.wrapping_mul(GOLDEN_GAMMA) ^ tag_b));
        SplitMix64 { state: s }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform f32 in [0, 1): top 24 bits of the draw scaled by 2^-24, so the
    /// full mantissa is random and the result is exact on every platform.
    #[inline]
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform f32 in [-scale, scale).
    #[inline]
    pub fn next_symmetric(&mut self, scale: f32) -> f32 {
        (self.next_f32() * 2.0 - 1.0) * scale
    }

    /// Uniform index in [0, bound) via Lemire's multiply-shift reduction.
    /// Bias is < 2^-32 for the bounds used here (token counts); acceptable
    /// and kept branch-free for speed.
    #[inline]
    pub fn next_index(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0 && bound <= u32::MAX as usize);
        let r = self.next_u64() >> 32;
        ((r * bound as u64) >> 32) as usize
    }
}

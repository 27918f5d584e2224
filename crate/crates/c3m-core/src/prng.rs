//! Seeded random streams used across the crate.
//!
//! Every stream is a xoshiro256++ generator. Seeding goes through
//! `seed_from_u64`, which expands the 64-bit seed with SplitMix64 exactly as
//! published, so a (seed, purpose) pair produces the same byte stream on any
//! platform. Uniform doubles take the top 53 bits of `next_u64`; normal draws
//! use the Box-Muller transform on two uniform draws. Both transforms are
//! written out here rather than pulled from a distributions crate so the
//! generated datasets are reproducible from this description alone.

use rand::RngCore;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub use rand_xoshiro::Xoshiro256PlusPlus as Stream;

/// Distinct purposes salt the master seed so streams never overlap.
#[derive(Copy, Clone, Debug)]
pub enum Purpose {
    LatentCodes,
    MixingMaps,
    Distortion,
    Noise,
    LocalCounts,
    ParamInit,
    Batching,
    Probe,
}

impl Purpose {
    fn salt(self) -> u64 {
        match self {
            Purpose::LatentCodes => 0x6c61_7465_6e74,
            Purpose::MixingMaps => 0x6d61_7073,
            Purpose::Distortion => 0x6469_7374,
            Purpose::Noise => 0x6e6f_6973_65,
            Purpose::LocalCounts => 0x636f_756e_74,
            Purpose::ParamInit => 0x696e_6974,
            Purpose::Batching => 0x6261_7463_68,
            Purpose::Probe => 0x7072_6f62_65,
        }
    }
}

/// A named substream of the master seed. `index` further splits a purpose,
/// e.g. one batching stream per epoch.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Stream {
    let mixed = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(purpose.salt())
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    Xoshiro256PlusPlus::seed_from_u64(mixed)
}

/// Uniform draw in [0, 1) from the top 53 bits of one `next_u64`.
pub fn unit(rng: &mut Stream) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in [lo, hi).
pub fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

/// Standard normal draw via Box-Muller: sqrt(-2 ln u1) * cos(2 pi u2) with
/// u1 in (0, 1]. Consumes exactly two uniforms per call.
pub fn normal(rng: &mut Stream) -> f64 {
    let u1 = 1.0 - unit(rng);
    let u2 = unit(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform integer in [0, n) by scaling a unit draw; n must be nonzero.
pub fn below(rng: &mut Stream, n: usize) -> usize {
    debug_assert!(n > 0);
    let v = (unit(rng) * n as f64) as usize;
    v.min(n - 1)
}

/// In-place Fisher-Yates shuffle driven by [`below`].
pub fn shuffle<T>(rng: &mut Stream, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

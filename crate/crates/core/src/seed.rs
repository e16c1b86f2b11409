//! Deterministic derivation of independent RNG streams.
//!
//! Every stochastic step keys its stream by `(master seed, purpose tag,
//! index)` so that replications, bootstrap resamples, and per-unit
//! imputation draws are independent and reproducible regardless of
//! execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_IMPUTE: u64 = 1;
pub const TAG_POPULATION: u64 = 2;
pub const TAG_RESPONSE: u64 = 3;
pub const TAG_EM: u64 = 4;
pub const TAG_BOOT_DELTA: u64 = 5;
pub const TAG_BOOT_FIT: u64 = 6;
pub const TAG_MC: u64 = 7;
pub const TAG_RESAMPLE: u64 = 8;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// An RNG whose 256-bit seed is mixed from `(seed, tag, index)`.
pub fn derived_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ tag.wrapping_mul(0xA24B_AED4_963E_E407) ^ index.wrapping_mul(0x9FB2_1C65_1E98_DF25);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Fold a second index into an already-derived stream key (e.g. bootstrap
/// replicate k, then unit i within it).
pub fn combine(seed: u64, tag: u64, index: u64) -> u64 {
    let mut state = seed ^ tag.wrapping_mul(0xA24B_AED4_963E_E407) ^ index.wrapping_mul(0x9FB2_1C65_1E98_DF25);
    splitmix64(&mut state)
}

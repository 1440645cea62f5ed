//! Seed derivation for deterministic, splittable random streams.
//!
//! All randomness flows from a single `u64` seed. Each consumer derives its
//! own ChaCha stream from `(seed, stage label, index)`, so independent units
//! of work (trials, permutations, batches) can run in any order or in
//! parallel without perturbing each other's draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Derive a child seed for `(seed, stage, index)`, for handing to
/// components that take a plain seed.
pub fn derive_seed(seed: u64, stage: &str, index: u64) -> u64 {
    let a = mix64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let b = mix64(a ^ fnv1a64(stage.as_bytes()));
    mix64(b ^ index.wrapping_mul(0xD134_2543_DE82_EF95))
}

/// Derive an independent random stream for `(seed, stage, index)`.
pub fn stream(seed: u64, stage: &str, index: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    let a = mix64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let b = mix64(a ^ fnv1a64(stage.as_bytes()));
    let c = mix64(b ^ index.wrapping_mul(0xD134_2543_DE82_EF95));
    let d = mix64(c ^ 0x94D0_49BB_1331_11EB);
    key[0..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..32].copy_from_slice(&d.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

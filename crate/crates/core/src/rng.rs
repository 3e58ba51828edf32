//! Deterministic seed forking.
//!
//! A single master seed forks labeled child seeds through a counter-based
//! mix, so per-op randomness is reproducible regardless of execution
//! interleaving.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive the child seed for (`master`, `label`, `index`).
pub fn child_seed(master: u64, label: &str, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(label.as_bytes())) ^ splitmix64(index))
}

/// Child generator for (`master`, `label`, `index`).
pub fn child_rng(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(master, label, index))
}

//! Deterministic RNG streams.
//!
//! Every random decision in the lab draws from a ChaCha8 stream derived from
//! an explicit `u64` seed plus a domain tag, so that independent consumers
//! (init, span sampling, dropout, mixture sampling) never share a stream and
//! results do not depend on evaluation order or thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the tag bytes; cheap, stable across platforms.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A ChaCha8 stream for `(seed, tag, index)`.
pub fn substream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(tag.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..32].copy_from_slice(&(seed ^ 0x9e37_79b9_7f4a_7c15).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Derived seed for nesting substreams without constructing them.
pub fn subseed(seed: u64, tag: &str, index: u64) -> u64 {
    fnv1a(tag.as_bytes())
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(seed)
        .rotate_left(17)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9))
}

//! Deterministic seed derivation.
//!
//! A run has one root seed. Every module, and every indexed unit of work
//! inside a module, derives its own seed from the root through the stable
//! mixers below, so reordering or parallelizing work never changes which
//! random stream a unit sees.

/// SplitMix64 finalizer. Bijective on u64, good avalanche; the standard
/// choice for turning counters into seeds.
#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a role tag.
///
/// The tag is folded in byte-by-byte (FNV-1a) before the final mix, so
/// `derive(s, "train")` and `derive(s, "eval")` are unrelated streams.
pub fn derive(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

/// Derive a per-index seed from a stream seed.
pub fn derive_idx(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

/// Derive a seed from two indices (e.g. epoch and step).
pub fn derive_idx2(seed: u64, a: u64, b: u64) -> u64 {
    derive_idx(derive_idx(seed, a), b)
}

/// Stable 64-bit hash of a token-id sequence, for per-call RNG seeding.
pub fn hash_tokens(tokens: &[u32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tokens {
        for b in t.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    splitmix64(h)
}

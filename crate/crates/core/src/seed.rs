//! Sub-seed derivation. All randomness in the workspace flows from a single
//! master seed; each stage derives its own stream by hashing the master seed
//! with a stage tag and an index, so stages stay independent and any stage
//! can be replayed in isolation.
//!
//! Derivation: FNV-1a over (master LE bytes, tag bytes, index LE bytes),
//! then a splitmix64 finalizer for avalanche. Both steps are fixed-width
//! integer arithmetic, identical on every platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    let mut h = state;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix_finalize(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a stage seed from the master seed, a stage tag, and an index.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = FNV_OFFSET;
    h = fnv1a(h, &master.to_le_bytes());
    h = fnv1a(h, tag.as_bytes());
    h = fnv1a(h, &index.to_le_bytes());
    splitmix_finalize(h)
}

/// Order-sensitive 64-bit digest of arbitrary bytes, for config
/// fingerprints in file headers.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    splitmix_finalize(fnv1a(FNV_OFFSET, bytes))
}

/// Deterministic RNG for one (master, tag, index) triple.
pub fn stage_rng(master: u64, tag: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, tag, index))
}

//! Counter-based random streams.
//!
//! Every random decision in a simulation draws from a stream keyed by
//! `(master_seed, purpose, ids...)`. Streams are independent of the order in
//! which they are created, so results do not depend on how many workers run
//! client rounds or in which order they finish.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A seeded random stream. ChaCha is itself counter-based, so the derived key
/// selects both the seed and the 64-bit stream id.
pub type Stream = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a stream even when
/// the remaining ids coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    ModelInit = 1,
    Synthetic = 2,
    Partition = 3,
    Split = 4,
    ClientSampling = 5,
    Mask = 6,
    Shuffle = 7,
    Probe = 8,
    Diagnostics = 9,
    Sweep = 10,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fold_key(master_seed: u64, purpose: Purpose, ids: &[u64]) -> u64 {
    let mut h = mix64(master_seed ^ GOLDEN);
    h = mix64(h ^ (purpose as u64).wrapping_mul(GOLDEN));
    for (i, &id) in ids.iter().enumerate() {
        h = mix64(h.wrapping_add(GOLDEN.wrapping_mul(i as u64 + 1)) ^ id);
    }
    h
}

/// Derive the stream for `(master_seed, purpose, ids)`.
pub fn stream(master_seed: u64, purpose: Purpose, ids: &[u64]) -> Stream {
    let key = fold_key(master_seed, purpose, ids);
    let mut seed = [0u8; 32];
    let mut z = key;
    for chunk in seed.chunks_exact_mut(8) {
        z = mix64(z.wrapping_add(GOLDEN));
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(mix64(key ^ 0x5851_f42d_4c95_7f2d));
    rng
}

/// Derive a child seed, e.g. for sweep cells.
pub fn derive_seed(master_seed: u64, purpose: Purpose, ids: &[u64]) -> u64 {
    mix64(fold_key(master_seed, purpose, ids))
}

//! Deterministic RNG streams.
//!
//! Every source of randomness in the pipeline is a ChaCha8 stream derived from
//! a master seed plus a few role tags. There is no hidden global state: a run
//! is reproducible from its seed alone, and resuming from a checkpoint only
//! needs the seed and the step counter.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; used to mix tags into key material.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent ChaCha8 stream from a seed and role tags.
///
/// Tags distinguish roles (noise vs dropout vs data) and indices (step,
/// sample). Different tag sequences give statistically independent streams.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x6a09_e667_f3bc_c908;
    let mut key = [0u8; 32];
    for tag in tags {
        state ^= splitmix64(&mut state).wrapping_add(*tag);
        let _ = splitmix64(&mut state);
    }
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stable 64-bit FNV-1a hash, used for tagging strings (scene ids) into streams
/// and for config provenance hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

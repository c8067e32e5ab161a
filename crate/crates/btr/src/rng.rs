//! Deterministic RNG stream derivation. Every source of randomness in a run
//! is a ChaCha8 stream keyed by (master_seed, stream tag, index), so runs with
//! the same master seed replay bit-for-bit and streams never alias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_ENV: u64 = 1;
pub const STREAM_ACTION: u64 = 2;
pub const STREAM_NOISE: u64 = 3;
pub const STREAM_TAUS: u64 = 4;
pub const STREAM_REPLAY: u64 = 5;
pub const STREAM_EVAL_ENV: u64 = 6;
pub const STREAM_EVAL_ACTION: u64 = 7;
pub const STREAM_INIT: u64 = 8;
pub const STREAM_PROBE: u64 = 9;
pub const STREAM_ANALYSIS: u64 = 10;
pub const STREAM_BOOTSTRAP: u64 = 11;

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha8 stream from the master seed.
/// `index` separates per-entity streams within a tag (one per env, eval round, ...).
pub fn stream_rng(master_seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut state = splitmix64(master_seed)
        ^ splitmix64(stream.wrapping_mul(0xA076_1D64_78BD_642F))
        ^ splitmix64(index.wrapping_mul(0xE703_7ED1_A0B4_28DB));
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

//! Deterministic RNG streams. Every random draw in a run descends from one
//! seed; independent streams are keyed by a path of integers (stage, step,
//! sample index, ...), so parallel work reproduces sequential results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child stream from `seed` and a key path.
pub fn derive_rng(seed: u64, path: &[u64]) -> Rng {
    let mut state = splitmix64(seed);
    for &k in path {
        state = splitmix64(state ^ splitmix64(k.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    let mut bytes = [0u8; 32];
    for (i, chunk) in bytes.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix64(state.wrapping_add(i as u64)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Stage tags used as the first key of a derivation path.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const HFT: u64 = 2;
    pub const REJECT: u64 = 3;
    pub const HGRPO: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const PIPELINE: u64 = 6;
}

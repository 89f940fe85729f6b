//! Counter-based random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha stream whose
//! seed is a hash of the run seed and a structured key (day, link, slot,
//! sample index, ...). Streams never depend on evaluation order, so results
//! are identical whether cells are computed sequentially or in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed and a key path into a single 64-bit value.
pub fn mix(seed: u64, key: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x5EED_0000_0000_0000);
    for (i, &k) in key.iter().enumerate() {
        h = splitmix64(h ^ splitmix64(k.wrapping_add((i as u64 + 1).wrapping_mul(GOLDEN))));
    }
    h
}

/// A ChaCha stream keyed by `(seed, key...)`.
pub fn keyed(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let a = mix(seed, key);
    let b = splitmix64(a ^ 0xA5A5_A5A5_A5A5_A5A5);
    let c = splitmix64(b);
    let d = splitmix64(c);
    let mut bytes = [0u8; 32];
    for (chunk, word) in bytes.chunks_exact_mut(8).zip([a, b, c, d]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Uniform draw in `[0, 1)` that is a pure function of `(seed, key)`.
pub fn unit(seed: u64, key: &[u64]) -> f64 {
    (mix(seed, key) >> 11) as f64 / (1u64 << 53) as f64
}

//! Randomness keyed by `(seed, tensor name, element index)`.
//!
//! Every tensor gets its own ChaCha8 stream: the key comes from the seed and
//! the stream id from a stable hash of the tensor name. Element `i` consumes
//! the 64-bit word pair at position `2i`, so the value drawn for an element
//! is fixed by its key and does not depend on iteration order or on how the
//! work is split across threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const CHUNK: usize = 1 << 16;

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for the `index`-th member of a family (e.g. the k-th model).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed ^ splitmix64(index)
}

/// Generator positioned at element `start` of the stream for `(seed, name)`.
pub fn stream(seed: u64, name: &str, start: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stable_hash(name.as_bytes()));
    rng.set_word_pos(2 * start as u128);
    rng
}

/// Next uniform draw in `[0, 1)` with 53 random bits.
pub fn next_unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// The uniform value attached to one element.
pub fn unit_at(seed: u64, name: &str, index: usize) -> f64 {
    next_unit(&mut stream(seed, name, index))
}

/// Uniform values for elements `0..n`, generated in parallel chunks.
pub fn units(seed: u64, name: &str, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    out.par_chunks_mut(CHUNK)
        .enumerate()
        .for_each(|(c, chunk)| {
            let mut rng = stream(seed, name, c * CHUNK);
            for v in chunk.iter_mut() {
                *v = next_unit(&mut rng);
            }
        });
    out
}

//! Counter-based seed derivation.
//!
//! Every random draw in the pipeline comes from a ChaCha stream whose seed is
//! `mix(master, purpose, index)`. Streams are independent of evaluation order,
//! so blocks and samples can be generated in parallel and still reproduce.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the purpose tag.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed of sub-stream `(tag, index)` under `master`.
pub fn substream_seed(master: u64, tag: &str, index: u64) -> u64 {
    let a = mix64(master ^ mix64(tag_hash(tag)));
    mix64(a ^ index.wrapping_mul(GOLDEN).rotate_left(17))
}

pub fn substream(master: u64, tag: &str, index: u64) -> StreamRng {
    let s = substream_seed(master, tag, index);
    let mut key = [0u8; 32];
    let mut z = s;
    for chunk in key.chunks_exact_mut(8) {
        z = mix64(z);
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    StreamRng::from_seed(key)
}

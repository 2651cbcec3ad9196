//! Deterministic, independently derived random streams.
//!
//! Every consumer of randomness asks for a stream by `(seed, tag, index)`.
//! Two different tags or indices never share a stream, so parallel workers
//! can each own one without coordination.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(tag: &str) -> u64 {
    tag.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    splitmix(seed ^ splitmix(fnv1a(tag)))
}

/// Opens the stream identified by `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag));
    rng.set_stream(index);
    rng
}

//! Seed derivation so independent random streams never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a base seed with a stream label (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

// Stream labels. Values are arbitrary but frozen: changing one changes
// every downstream artifact.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_SHUFFLE: u64 = 2;
pub(crate) const STREAM_TEACHER: u64 = 3;
pub(crate) const STREAM_DELTA: u64 = 4;
pub(crate) const STREAM_LORA_INIT: u64 = 5;
pub(crate) const STREAM_LORA_SHUFFLE: u64 = 6;
pub(crate) const STREAM_NOISE: u64 = 7;
pub(crate) const STREAM_SUBSET: u64 = 8;
pub(crate) const STREAM_CONTROL: u64 = 9;

//! Named, seeded random streams.
//!
//! Every random decision derives from one master seed. Components draw from
//! independent substreams keyed by name (and optionally by an index), so
//! changing how many numbers one component consumes never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Well-known substream names.
pub mod stream {
    pub const DATA: &str = "data";
    pub const INIT: &str = "init";
    pub const SAMPLING: &str = "sampling";
    pub const SHUFFLE: &str = "shuffle";
    pub const IFOR: &str = "ifor";
    pub const NOISE: &str = "noise";
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit seed for `(seed, name, index)`.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    // FNV-1a over the name, then mixed with the seed and index.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix(splitmix(seed ^ h).wrapping_add(splitmix(index)))
}

pub fn substream(seed: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, name, 0))
}

pub fn substream_indexed(seed: u64, name: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, name, index))
}

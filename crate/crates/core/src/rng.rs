//! Reproducible random streams addressed by coordinates.
//!
//! Training draws randomness per (seed, purpose, epoch, batch or sequence), so
//! a resumed run sees exactly the same streams as an uninterrupted one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes; distinct values keep streams independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    Mask = 4,
    Split = 5,
    Augment = 6,
    Synth = 7,
    Eval = 8,
    Kmeans = 9,
    Silhouette = 10,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha8 stream determined by `seed`, `stream` and the coordinates.
pub fn keyed(seed: u64, stream: Stream, coords: &[u64]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut h = splitmix(seed ^ splitmix(stream as u64));
    for &c in coords {
        h = splitmix(h ^ splitmix(c.wrapping_add(0x51)));
    }
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        h = splitmix(h.wrapping_add(i as u64));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

//! Counter-keyed random number streams.
//!
//! Every sampled object is generated from its own ChaCha12 instance whose
//! 256-bit key is derived from the triple `(seed, stream, path)`. Generation
//! is therefore a pure function of the key: paths can be produced in any
//! order, on any number of threads, and the result is bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Identifies one random stream: a user seed, a role stream id and a path
/// counter within the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngKey {
    pub seed: u64,
    pub stream: u64,
    pub path: u64,
}

impl RngKey {
    pub fn new(seed: u64, stream: u64, path: u64) -> Self {
        Self { seed, stream, path }
    }

    /// Same stream, different path counter.
    pub fn with_path(self, path: u64) -> Self {
        Self { path, ..self }
    }
}

/// splitmix64 finalizer; full-avalanche mixing of a 64-bit word.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a sub-stream id, used to split one logical stream into roles
/// (e.g. Brownian increments vs. jump marks) without collisions.
pub fn substream(stream: u64, tag: u64) -> u64 {
    let mut s = stream ^ 0xa0761d6478bd642f_u64.wrapping_mul(tag.wrapping_add(1));
    splitmix64(&mut s)
}

/// ChaCha12 generator keyed by `(seed, stream, path)`.
pub fn rng_for(key: RngKey) -> ChaCha12Rng {
    let mut state = key
        .seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(key.stream.rotate_left(17))
        .wrapping_add(key.path.rotate_left(43));
    // feed all three words through the mixer so that distinct keys give
    // distinct 256-bit seeds with overwhelming probability
    state ^= splitmix64(&mut { key.seed });
    state ^= splitmix64(&mut { key.stream ^ 0x6a09e667f3bcc909 });
    state ^= splitmix64(&mut { key.path ^ 0xbb67ae8584caa73b });
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(bytes)
}

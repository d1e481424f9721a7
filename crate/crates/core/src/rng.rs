//! Deterministic random streams.
//!
//! Every consumer (particle init, trial, bootstrap replicate) gets its own
//! ChaCha8 stream keyed by `(master seed, stream id)`, so results do not
//! depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Stream ids for a two-level hierarchy, e.g. (trial, purpose).
pub fn substream(seed: u64, outer: u64, inner: u64) -> StreamRng {
    stream(seed, (outer << 16) ^ inner)
}

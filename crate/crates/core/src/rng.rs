//! Seeded random streams.
//!
//! Every parallel worker (sequence, chain, probe) owns a stream derived from
//! `base_seed + index`, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream(base_seed: u64, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(index))
}

/// A second family of streams that does not collide with [`stream`] for the
/// same base seed (used when one job needs two independent sources).
pub fn substream(base_seed: u64, index: u64, lane: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(index));
    rng.set_stream(lane.wrapping_add(1));
    rng
}

//! Seeded randomness. Every random draw in a run derives from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named purpose, so that adding draws in one
/// subsystem does not shift another's sequence.
pub fn derived(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub const STREAM_INIT: u64 = 1;
pub const STREAM_DATA: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;
pub const STREAM_CROP: u64 = 4;
pub const STREAM_EVAL: u64 = 5;

/// Stream for one epoch of a purpose, so that a run resumed at `epoch`
/// replays exactly the draws of an uninterrupted run.
pub fn for_epoch(seed: u64, stream: u64, epoch: usize) -> Rng {
    derived(seed, (stream << 32) | epoch as u64)
}

//! Counter-based RNG stream derivation.
//!
//! One global seed fans out into independent ChaCha8 streams. The stream id
//! packs `(stage, class, index)` as `stage << 56 | class << 24 | index`, so
//! every stage/class/trajectory draws from its own stream regardless of the
//! order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Stage {
    Benchmark = 1,
    Discovery = 2,
    Alignment = 3,
    Evaluation = 4,
    Baseline = 5,
}

pub fn stream(seed: u64, stage: Stage, class: u32, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = (stage as u64) << 56 | (u64::from(class) & 0xFFFF_FFFF) << 24 | u64::from(index & 0xFF_FFFF);
    rng.set_stream(id);
    rng
}

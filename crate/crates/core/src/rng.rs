//! Seed-derived random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by
//! `(seed, domain, index)`, so a stage can be replayed from any step
//! without carrying generator state around.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream domains. Kept in the high bits of the ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    SamplerWorker = 1,
    TrainBatch = 2,
    Dropout = 3,
    Init = 4,
    Synthetic = 5,
    Finetune = 6,
    Heldout = 7,
}

/// Random stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 56) | (index & ((1 << 56) - 1)));
    rng
}

//! Seed management. Every random decision in a run draws from a ChaCha stream
//! derived from the run seed and a fixed purpose tag, so changing one part of
//! the pipeline (say, the loss rule) never shifts the draws of another.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as RunRng;

/// Independent purposes within a single run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Prototypes = 1,
    TrainPool = 2,
    Init = 3,
    Batches = 4,
    DropWeights = 5,
    EvalPool = 6,
    Resample = 7,
}

pub fn stream(seed: u64, purpose: Stream) -> RunRng {
    let mut rng = RunRng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

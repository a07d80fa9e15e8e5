//! Independent random streams derived from one experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose of a random stream. Each purpose gets its own ChaCha stream, so
/// drawing more numbers for one purpose never shifts another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Shuffle = 1,
    Noise = 2,
    Eval = 3,
    Reparam = 4,
    Data = 5,
    Cli = 6,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

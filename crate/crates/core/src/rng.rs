//! Seeded random streams. Every stochastic operation derives its generator
//! from `(seed, stream, index)`, so results never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Crop = 3,
    Timestep = 4,
    Noise = 5,
    Sampler = 6,
    Synth = 7,
    Analysis = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> Rng {
    let key = splitmix(splitmix(seed) ^ splitmix((stream as u64) << 56 ^ index));
    ChaCha8Rng::seed_from_u64(key)
}

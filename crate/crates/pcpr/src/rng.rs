//! Seed plumbing: every random choice in the pipeline flows from one user
//! seed through named sub-streams, so sampling, initialization and shuffling
//! can vary independently while staying reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Sampling,
    Shuffle,
    Selection,
    MeshSampling,
    Metrics,
    GradCheck,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x01,
            Stream::Sampling => 0x02,
            Stream::Shuffle => 0x03,
            Stream::Selection => 0x04,
            Stream::MeshSampling => 0x05,
            Stream::Metrics => 0x06,
            Stream::GradCheck => 0x07,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derived 64-bit seed for `(seed, stream, a, b)`.
pub fn derive_seed(seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut s = splitmix64(seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    s = splitmix64(s ^ stream.tag());
    s = splitmix64(s ^ a);
    splitmix64(s ^ b)
}

/// Deterministic RNG for `(seed, stream, a, b)`; `a`/`b` index things like
/// epoch and region so every batch draw has its own stream.
pub fn substream(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(seed, stream, a, b))
}

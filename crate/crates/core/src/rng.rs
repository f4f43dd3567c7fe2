//! Seed derivation for named random sub-streams.
//!
//! Every consumer of randomness builds its own generator from the run seed,
//! a stream label and an index, so no generator is ever shared.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Labels for the independent random streams of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Dataset,
    OodCandidates,
    Concepts,
    VisualNoise,
    TextNoise,
    Masking,
    Shuffle,
    Init,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Dataset => 0x11,
            Stream::OodCandidates => 0x12,
            Stream::Concepts => 0x13,
            Stream::VisualNoise => 0x21,
            Stream::TextNoise => 0x22,
            Stream::Masking => 0x31,
            Stream::Shuffle => 0x41,
            Stream::Init => 0x51,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a run seed, a stream and an index into a fresh 64-bit seed.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream.tag())) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

/// 64-bit FNV-1a, used to give each named parameter its own init stream.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

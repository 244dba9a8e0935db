//! Deterministic stream derivation.
//!
//! Every random decision in the project is drawn from a stream derived
//! functionally from `(master seed, purpose tag, indices)`. There are no
//! long-lived RNG objects: a checkpoint only needs to store the master seed
//! and the epoch counter to resume bitwise-identically.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Purpose tags keep independent streams from colliding.
#[derive(Clone, Copy, Debug)]
pub enum StreamTag {
    InitParams,
    IdentityProfile,
    CameraProfile,
    RenderImage,
    PkSample,
    Augment,
    GradCheck,
}

impl StreamTag {
    fn id(self) -> u64 {
        match self {
            StreamTag::InitParams => 1,
            StreamTag::IdentityProfile => 2,
            StreamTag::CameraProfile => 3,
            StreamTag::RenderImage => 4,
            StreamTag::PkSample => 5,
            StreamTag::Augment => 6,
            StreamTag::GradCheck => 7,
        }
    }
}

/// splitmix64; stable across platforms and releases, unlike `DefaultHasher`.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent RNG stream from the master seed, a tag and up to
/// three ordinals (epoch, step, slot — unused ordinals pass 0).
pub fn stream(seed: u64, tag: StreamTag, a: u64, b: u64, c: u64) -> ChaCha12Rng {
    let mut s = splitmix64(seed ^ 0x5eed_0000_0000_0001);
    s = splitmix64(s ^ tag.id());
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ b);
    s = splitmix64(s ^ c);
    ChaCha12Rng::seed_from_u64(s)
}

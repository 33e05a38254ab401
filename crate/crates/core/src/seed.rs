//! Seed derivation.
//!
//! All randomness comes from ChaCha8 streams. A master seed is split into
//! per-stage seeds with SplitMix64 over `master ^ STAGE_TAG`, so each stage
//! can be re-run on its own and still see the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    HeadInit,
    Sampler,
    KMeans,
    Split,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Simulate => 0x5349_4d55_4c41_5445,
            Stage::HeadInit => 0x4845_4144_494e_4954,
            Stage::Sampler => 0x5341_4d50_4c45_5221,
            Stage::KMeans => 0x4b4d_4541_4e53_2121,
            Stage::Split => 0x5350_4c49_5421_2121,
        }
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stage_seed(master: u64, stage: Stage) -> u64 {
    splitmix64(master ^ stage.tag())
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream `stream` of the generator keyed by `seed`.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

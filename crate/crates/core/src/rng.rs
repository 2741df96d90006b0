//! Seed derivation. Every random stream in the simulator is a ChaCha8
//! generator keyed by a hash of a global seed and a stream path, so reruns
//! are reproducible and streams never overlap by accident.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic hash of a seed and a path of stream coordinates.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(seed), |h, &p| splitmix(h ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019))))
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, path))
}

pub fn normal<S: Scalar>(rng: &mut Rng) -> S {
    let v: f64 = StandardNormal.sample(rng);
    S::from_f64_lossy(v)
}

pub fn normal_vec<S: Scalar>(rng: &mut Rng, n: usize, scale: f64) -> Vec<S> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            S::from_f64_lossy(v * scale)
        })
        .collect()
}

// Stream labels keep unrelated consumers of the same seed apart.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_ANCHORS: u64 = 2;
pub const STREAM_CLIENT: u64 = 3;
pub const STREAM_PARTICIPATION: u64 = 4;
pub const STREAM_PROMPTS: u64 = 5;
pub const STREAM_HEAD: u64 = 6;
pub const STREAM_SPLIT: u64 = 7;
pub const STREAM_SYNTH: u64 = 8;
pub const STREAM_TOPO: u64 = 9;
pub const STREAM_PARTITION: u64 = 10;
pub const STREAM_FINETUNE: u64 = 11;

//! Seeded random streams.
//!
//! Every consumer of randomness asks for its own stream keyed by
//! `(seed, purpose, index)`, so changing how one purpose draws numbers never
//! perturbs another, and any stream can be recreated from the step index alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

/// Purposes used across the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Timestep = 2,
    Noise = 3,
    Dropout = 4,
    DataOrder = 5,
    Render = 6,
    Pairing = 7,
    Sampling = 8,
    Selection = 9,
    Encoder = 10,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ purpose as u64) ^ index)
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, index))
}

pub fn normal_vec_f32(rng: &mut StreamRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal_vec_f64(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

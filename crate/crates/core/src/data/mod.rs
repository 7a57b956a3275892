//! Synthetic episodic image corpus.
//!
//! An episode is a set of images rendered from the same shared factors
//! (shape class and hue) with independent per-member nuisance (position,
//! scale, rotation, pixel noise). Pairs drawn inside an episode share
//! semantics but differ in detail.

pub mod batch;
pub mod pairs;
pub mod render;
pub mod shard;

pub use batch::{Batch, BatchSource, PairBatcher};
pub use pairs::{
    candidate_pairs, filter_by_similarity, filter_pairs, read_pairs, read_pairs_from, sample_pair,
    write_pairs, write_pairs_to, FilterConfig, PairMode, PairRecord,
};
pub use render::{render, ImageConfig, NUM_CLASSES};
pub use shard::{generate_corpus, Shard};

use crate::tensor::Tensor;

/// Per-image nuisance factors, in the renderer's normalized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nuisance {
    /// Center offset as a fraction of the half-extent, in `[-0.35, 0.35]`.
    pub pos_x: f32,
    pub pos_y: f32,
    /// Radius as a fraction of the half-extent, in `[0.45, 0.75]`.
    pub scale: f32,
    /// Radians in `[0, 2π)`.
    pub rotation: f32,
    /// Stddev of additive pixel noise, in `[0, 0.08]`.
    pub noise: f32,
}

impl Nuisance {
    pub const LEN: usize = 5;

    pub fn to_array(self) -> [f32; Self::LEN] {
        [
            self.pos_x,
            self.pos_y,
            self.scale,
            self.rotation,
            self.noise,
        ]
    }

    pub fn from_array(a: [f32; Self::LEN]) -> Self {
        Self {
            pos_x: a[0],
            pos_y: a[1],
            scale: a[2],
            rotation: a[3],
            noise: a[4],
        }
    }
}

/// Generative factors of one rendered image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageFactors {
    pub class: u32,
    pub hue: f32,
    pub nuisance: Nuisance,
}

/// An image with its id and, for synthetic images, its factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    /// `[H, W, C]` in `[-1, 1]`.
    pub pixels: Tensor<f32>,
    pub factors: Option<ImageFactors>,
}

/// One episode of the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode_id: u64,
    pub class: u32,
    pub hue: f32,
    pub members: Vec<u64>,
    pub nuisance: Vec<Nuisance>,
}

//! Deterministic batch iteration over (target image, conditioning context)
//! pairs.

use rand::seq::SliceRandom;

use super::pairs::PairRecord;
use super::shard::Shard;
use crate::encoders::{ContextBatch, EmbeddingTable};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

/// One training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, H, W, C]`.
    pub targets: Tensor<f32>,
    pub context: ContextBatch,
    pub pairs: Vec<PairRecord>,
}

/// Anything that can produce the batch for a given optimizer step.
///
/// `batch_at` must be a pure function of `step` so a resumed run sees the
/// same data as an uninterrupted one.
pub trait BatchSource {
    fn batch_at(&mut self, step: u64) -> Result<Batch>;
    fn batch_size(&self) -> usize;
}

/// Epoch-shuffled iteration over a fixed pair list.
pub struct PairBatcher {
    shard: Shard,
    embeddings: EmbeddingTable,
    pairs: Vec<PairRecord>,
    batch_size: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl PairBatcher {
    pub fn new(
        shard: Shard,
        embeddings: EmbeddingTable,
        pairs: Vec<PairRecord>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("no training pairs".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        for p in &pairs {
            shard.pixels(p.target_image_id)?;
            embeddings.get(p.cond_image_id)?;
        }
        Ok(Self {
            shard,
            embeddings,
            pairs,
            batch_size,
            seed,
            cached: None,
        })
    }

    pub fn pairs(&self) -> &[PairRecord] {
        &self.pairs
    }

    pub fn shard(&self) -> &Shard {
        &self.shard
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    fn order(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.pairs.len()).collect();
            order.shuffle(&mut stream(self.seed, Purpose::DataOrder, epoch));
            self.cached = Some((epoch, order));
        }
        &self.cached.as_ref().unwrap().1
    }

    fn pair_at(&mut self, global: u64) -> PairRecord {
        let n = self.pairs.len() as u64;
        let idx = self.order(global / n)[(global % n) as usize];
        self.pairs[idx]
    }
}

impl BatchSource for PairBatcher {
    fn batch_at(&mut self, step: u64) -> Result<Batch> {
        let b = self.batch_size as u64;
        let picked: Vec<PairRecord> = (0..b).map(|j| self.pair_at(step * b + j)).collect();
        let mut targets = Vec::with_capacity(self.batch_size * self.shard.image.numel());
        let mut ctx = Vec::with_capacity(self.batch_size);
        for p in &picked {
            targets.extend_from_slice(self.shard.pixels(p.target_image_id)?);
            ctx.push(self.embeddings.get(p.cond_image_id)?);
        }
        let [h, w, c] = self.shard.image.shape();
        Ok(Batch {
            targets: Tensor::new(&[self.batch_size, h, w, c], targets)?,
            context: ContextBatch::from_contexts(&ctx)?,
            pairs: picked,
        })
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }
}

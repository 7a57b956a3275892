//! Conditional generation from a trained denoiser.

use crate::data::ImageRecord;
use crate::diffusion::{sample, SamplerConfig, ScheduleConfig, VelocityModel};
use crate::encoders::{ContextBatch, ContextTokens, Encoder, EncoderSpec};
use crate::error::{shape_err, Error, Result};
use crate::metrics::ConditionalSampler;
use crate::model::{Checkpoint, Denoiser};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

/// Config prefix under which training records its conditioning encoder.
pub const ENCODER_PREFIX: &str = "encoder";

/// A denoiser paired with the encoder that produces its context.
pub struct ModelSampler {
    pub model: Denoiser,
    pub encoder: Encoder,
    pub sampler: SamplerConfig,
    pub schedule: ScheduleConfig,
}

impl ModelSampler {
    pub fn new(model: Denoiser, encoder: Encoder, sampler: SamplerConfig) -> Result<Self> {
        sampler.validate()?;
        let spec = encoder.spec();
        if spec.tokens != model.cfg.context_tokens || spec.dim != model.cfg.context_dim {
            return Err(Error::Config(format!(
                "encoder emits {}x{} context, model expects {}x{}",
                spec.tokens, spec.dim, model.cfg.context_tokens, model.cfg.context_dim
            )));
        }
        let image = model.cfg.image;
        Ok(Self {
            model,
            encoder,
            sampler,
            schedule: ScheduleConfig::for_resolution(image.height.min(image.width)),
        })
    }

    /// Rebuilds model and encoder from a training checkpoint; `ema` selects
    /// the averaged weights.
    pub fn from_checkpoint(ck: &Checkpoint, ema: bool, sampler: SamplerConfig) -> Result<Self> {
        let model = ck.denoiser(ema)?;
        let spec = EncoderSpec::from_kv(&ck.config, ENCODER_PREFIX, model.cfg.image)?;
        Self::new(model, Encoder::new(&spec)?, sampler)
    }

    /// `n` samples `[n, H, W, C]` for one context. `seed` fixes the initial
    /// noise and every ancestral draw.
    pub fn sample_context(
        &self,
        ctx: &ContextTokens,
        n: usize,
        guidance: f64,
        seed: u64,
    ) -> Result<Tensor<f32>> {
        if n == 0 {
            return Err(Error::InvalidArgument("need at least one sample".into()));
        }
        let cond = ContextBatch::from_contexts(&[ctx])?.repeat_each(n)?;
        let mut uncond = cond.clone();
        uncond.keep.iter_mut().for_each(|k| *k = false);
        let both = ContextBatch {
            tokens: Tensor::stack(&[&cond.tokens, &uncond.tokens])?.reshape(&[
                2 * n,
                ctx.num_tokens(),
                ctx.dim(),
            ])?,
            cls: Tensor::stack(&[&cond.cls, &uncond.cls])?.reshape(&[2 * n, ctx.dim()])?,
            keep: cond.keep.iter().chain(&uncond.keep).copied().collect(),
        };
        let mut velocity = Velocity {
            model: &self.model,
            cond,
            uncond,
            both,
        };
        let cfg = SamplerConfig {
            guidance,
            ..self.sampler
        };
        let [h, w, c] = self.model.cfg.image.shape();
        sample(
            &mut velocity,
            &cfg,
            &self.schedule,
            &[n, h, w, c],
            &mut stream(seed, Purpose::Sampling, 0),
        )
    }
}

struct Velocity<'a> {
    model: &'a Denoiser,
    cond: ContextBatch,
    uncond: ContextBatch,
    /// `cond` then `uncond`, for one batched evaluation.
    both: ContextBatch,
}

impl VelocityModel for Velocity<'_> {
    fn predict(&mut self, z: &Tensor<f32>, t: f64, conditional: bool) -> Result<Tensor<f32>> {
        let ctx = if conditional {
            &self.cond
        } else {
            &self.uncond
        };
        self.model.predict(z, &vec![t; z.shape()[0]], Some(ctx))
    }

    fn predict_both(&mut self, z: &Tensor<f32>, t: f64) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let n = z.shape()[0];
        if self.both.len() != 2 * n {
            return Err(shape_err!(
                "latent batch {n} does not match context batch {}",
                self.cond.len()
            ));
        }
        let mut doubled = z.data().to_vec();
        doubled.extend_from_slice(z.data());
        let mut shape = z.shape().to_vec();
        shape[0] = 2 * n;
        let v = self.model.predict(
            &Tensor::new(&shape, doubled)?,
            &vec![t; 2 * n],
            Some(&self.both),
        )?;
        let mut data = v.into_data();
        let uncond = data.split_off(data.len() / 2);
        Ok((
            Tensor::new(z.shape(), data)?,
            Tensor::new(z.shape(), uncond)?,
        ))
    }
}

/// Splits `[n, H, W, C]` into `n` images clamped to `[-1, 1]`.
pub fn split_images(batch: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    (0..batch.shape()[0])
        .map(|i| {
            let mut im = batch.index_first(i)?;
            im.data_mut()
                .iter_mut()
                .for_each(|v| *v = v.clamp(-1.0, 1.0));
            Ok(im)
        })
        .collect()
}

impl ConditionalSampler for ModelSampler {
    fn generate(
        &mut self,
        cond: &ImageRecord,
        n: usize,
        guidance: f64,
        seed: u64,
    ) -> Result<Vec<Tensor<f32>>> {
        let ctx = self.encoder.encode(cond)?;
        split_images(&self.sample_context(&ctx, n, guidance, seed)?)
    }
}

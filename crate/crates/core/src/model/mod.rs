//! Transformer denoiser over image patches.
//!
//! ```text
//! z_t ─ patchify ─ linear ─ +pos ─┬─ block × N ─ LN ─ linear(0-init) ─ unpatchify ─ v̂
//! t ─ sinusoid ─ MLP ─┬─ (+ linear(LN(cls)) in film mode) ─ emb
//!                     └─ each block: silu(emb) → shift/scale for its norms
//! block: x += SelfAttn(mod(LN(x)))
//!        x += CrossAttn(LN(x), context tokens)      (cross-attention mode)
//!        x += MLP(mod(LN(x)))
//! ```
//!
//! Context tokens carry no positional encoding, so cross-attention is
//! invariant to token order. A learned null context stands in for dropped
//! or absent conditioning.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{Checkpoint, EMA};
pub use forward::{drop_context, Bound};
pub use params::Params;

use std::fmt;
use std::str::FromStr;

use crate::config::KeyValues;
use crate::data::ImageConfig;
use crate::encoders::ContextBatch;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConditioningMode {
    #[default]
    CrossAttention,
    Film,
    None,
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditioningMode::CrossAttention => "cross-attention",
            ConditioningMode::Film => "film",
            ConditioningMode::None => "none",
        })
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-attention" | "cross" => Ok(ConditioningMode::CrossAttention),
            "film" => Ok(ConditioningMode::Film),
            "none" => Ok(ConditioningMode::None),
            other => Err(Error::Config(format!(
                "unknown conditioning mode {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub image: ImageConfig,
    pub patch_size: usize,
    pub d_model: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mode: ConditioningMode,
    /// `T_c`
    pub context_tokens: usize,
    /// `D_c`
    pub context_dim: usize,
    pub time_dim: usize,
    pub mlp_ratio: usize,
    pub context_dropout: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image: ImageConfig::default(),
            patch_size: 2,
            d_model: 64,
            num_blocks: 4,
            num_heads: 4,
            mode: ConditioningMode::CrossAttention,
            context_tokens: 16,
            context_dim: 32,
            time_dim: 64,
            mlp_ratio: 4,
            context_dropout: 0.1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        let (h, w, p) = (
            self.image.height as usize,
            self.image.width as usize,
            self.patch_size,
        );
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!(
                "patch size {p} does not tile {h}x{w}"
            )));
        }
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads)
        {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.context_tokens == 0
            || self.context_dim == 0
            || self.time_dim == 0
            || self.mlp_ratio == 0
        {
            return Err(Error::Config(
                "context, time and mlp dims must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.context_dropout) {
            return Err(Error::Config(format!(
                "context dropout {} outside [0, 1]",
                self.context_dropout
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image.height as usize / self.patch_size)
            * (self.image.width as usize / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image.channels as usize
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("model.height", self.image.height);
        kv.set("model.width", self.image.width);
        kv.set("model.channels", self.image.channels);
        kv.set("model.patch_size", self.patch_size);
        kv.set("model.d_model", self.d_model);
        kv.set("model.num_blocks", self.num_blocks);
        kv.set("model.num_heads", self.num_heads);
        kv.set("model.mode", self.mode);
        kv.set("model.context_tokens", self.context_tokens);
        kv.set("model.context_dim", self.context_dim);
        kv.set("model.time_dim", self.time_dim);
        kv.set("model.mlp_ratio", self.mlp_ratio);
        kv.set("model.context_dropout", self.context_dropout);
        kv
    }

    /// Starts from `self` and applies any `model.*` keys present.
    pub fn updated_from(&self, kv: &KeyValues) -> Result<Self> {
        let mut c = self.clone();
        kv.load("model.height", &mut c.image.height)?;
        kv.load("model.width", &mut c.image.width)?;
        kv.load("model.channels", &mut c.image.channels)?;
        kv.load("model.patch_size", &mut c.patch_size)?;
        kv.load("model.d_model", &mut c.d_model)?;
        kv.load("model.num_blocks", &mut c.num_blocks)?;
        kv.load("model.num_heads", &mut c.num_heads)?;
        kv.load("model.mode", &mut c.mode)?;
        kv.load("model.context_tokens", &mut c.context_tokens)?;
        kv.load("model.context_dim", &mut c.context_dim)?;
        kv.load("model.time_dim", &mut c.time_dim)?;
        kv.load("model.mlp_ratio", &mut c.mlp_ratio)?;
        kv.load("model.context_dropout", &mut c.context_dropout)?;
        c.validate()?;
        Ok(c)
    }

    pub const KEYS: &'static [&'static str] = &[
        "model.height",
        "model.width",
        "model.channels",
        "model.patch_size",
        "model.d_model",
        "model.num_blocks",
        "model.num_heads",
        "model.mode",
        "model.context_tokens",
        "model.context_dim",
        "model.time_dim",
        "model.mlp_ratio",
        "model.context_dropout",
    ];
}

/// A configured denoiser with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub params: Params,
}

impl Denoiser {
    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            params: Params::init(cfg, seed)?,
        })
    }

    /// Inference-only forward pass: `z [B,H,W,C]`, one `t` per example.
    pub fn predict(
        &self,
        z: &Tensor<f32>,
        t: &[f64],
        context: Option<&ContextBatch>,
    ) -> Result<Tensor<f32>> {
        let tape = Tape::<f32>::new();
        let bound = Bound::constants(&tape, &self.params);
        let out = bound.forward(&self.cfg, z, t, context)?;
        Ok(out.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec_f32, stream, Purpose};

    fn small(mode: ConditioningMode) -> DenoiserConfig {
        DenoiserConfig {
            image: ImageConfig {
                height: 4,
                width: 4,
                channels: 3,
            },
            patch_size: 2,
            d_model: 8,
            num_blocks: 1,
            num_heads: 2,
            mode,
            context_tokens: 3,
            context_dim: 5,
            time_dim: 6,
            mlp_ratio: 4,
            context_dropout: 0.1,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(
            shape,
            normal_vec_f32(&mut stream(seed, Purpose::Noise, 0), n),
        )
        .unwrap()
    }

    fn context(b: usize, cfg: &DenoiserConfig, seed: u64) -> ContextBatch {
        ContextBatch {
            tokens: random(&[b, cfg.context_tokens, cfg.context_dim], seed),
            cls: random(&[b, cfg.context_dim], seed + 1),
            keep: vec![true; b],
        }
    }

    /// Perturbs the zero-initialized output layer so outputs depend on inputs.
    fn wake(model: &mut Denoiser) {
        let shape = model.params.get("out.w").unwrap().shape().to_vec();
        *model.params.get_mut("out.w").unwrap() = random(&shape, 99);
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // 1 block, cross-attention: d=8, e=6, Dc=5, Tc=3, patch dim 12, 4 patches
        let (d, e, dc, tc, pd, t) = (8, 6, 5, 3, 12, 4);
        let expected = (pd * d + d) + t * d                 // patch, pos
            + (d * e + e) + (e * e + e)                      // time MLP
            + tc * dc                                        // null tokens
            + (e * 4 * d + 4 * d)                            // modulation
            + (d * 3 * d + 3 * d) + (d * d + d)              // self-attention
            + 2 * d + (d * d + d) + (dc * 2 * d + 2 * d) + (d * d + d) // cross-attention
            + (d * 4 * d + 4 * d) + (4 * d * d + d)          // MLP
            + 2 * d + (d * pd + pd); // final norm, out
        let p = Params::init(&small(ConditioningMode::CrossAttention), 0).unwrap();
        assert_eq!(p.num_scalars(), expected);
    }

    #[test]
    fn init_is_deterministic_and_predicts_zero() {
        let cfg = small(ConditioningMode::CrossAttention);
        let a = Denoiser::init(&cfg, 3).unwrap();
        assert_eq!(a, Denoiser::init(&cfg, 3).unwrap());
        assert_ne!(a, Denoiser::init(&cfg, 4).unwrap());
        let z = random(&[2, 4, 4, 3], 1);
        let out = a
            .predict(&z, &[0.3, 0.7], Some(&context(2, &cfg, 5)))
            .unwrap();
        assert_eq!(out.shape(), &[2, 4, 4, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn none_mode_ignores_context() {
        let cfg = small(ConditioningMode::None);
        let mut m = Denoiser::init(&cfg, 1).unwrap();
        wake(&mut m);
        let z = random(&[2, 4, 4, 3], 1);
        let a = m
            .predict(&z, &[0.2, 0.9], Some(&context(2, &cfg, 5)))
            .unwrap();
        let b = m
            .predict(&z, &[0.2, 0.9], Some(&context(2, &cfg, 50)))
            .unwrap();
        let c = m.predict(&z, &[0.2, 0.9], None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn cross_attention_is_token_order_invariant() {
        let cfg = small(ConditioningMode::CrossAttention);
        let mut m = Denoiser::init(&cfg, 1).unwrap();
        wake(&mut m);
        let z = random(&[1, 4, 4, 3], 1);
        let ctx = context(1, &cfg, 5);
        let (tc, dc) = (cfg.context_tokens, cfg.context_dim);
        let mut perm = ctx.clone();
        for (dst, src) in [(0, 2), (1, 0), (2, 1)] {
            perm.tokens.data_mut()[dst * dc..(dst + 1) * dc]
                .copy_from_slice(&ctx.tokens.data()[src * dc..(src + 1) * dc]);
        }
        assert_eq!(perm.tokens.numel(), tc * dc);
        let a = m.predict(&z, &[0.4], Some(&ctx)).unwrap();
        let b = m.predict(&z, &[0.4], Some(&perm)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
        let other = m.predict(&z, &[0.4], Some(&context(1, &cfg, 77))).unwrap();
        assert!(a.max_abs_diff(&other) > 1e-4);
    }

    #[test]
    fn film_mode_reads_only_cls() {
        let cfg = small(ConditioningMode::Film);
        let mut m = Denoiser::init(&cfg, 1).unwrap();
        wake(&mut m);
        let z = random(&[2, 4, 4, 3], 1);
        let ctx = context(2, &cfg, 5);
        let mut other_tokens = ctx.clone();
        other_tokens.tokens = random(&[2, 3, 5], 123);
        let a = m.predict(&z, &[0.2, 0.6], Some(&ctx)).unwrap();
        assert_eq!(a, m.predict(&z, &[0.2, 0.6], Some(&other_tokens)).unwrap());
        let mut other_cls = ctx.clone();
        other_cls.cls = random(&[2, 5], 321);
        assert!(a.max_abs_diff(&m.predict(&z, &[0.2, 0.6], Some(&other_cls)).unwrap()) > 1e-4);
    }

    #[test]
    fn dropped_examples_match_null_context() {
        let cfg = small(ConditioningMode::CrossAttention);
        let mut m = Denoiser::init(&cfg, 1).unwrap();
        wake(&mut m);
        let z = random(&[2, 4, 4, 3], 1);
        let mut ctx = context(2, &cfg, 5);
        ctx.keep = vec![false, false];
        assert_eq!(
            m.predict(&z, &[0.5, 0.5], Some(&ctx)).unwrap(),
            m.predict(&z, &[0.5, 0.5], None).unwrap()
        );
    }

    #[test]
    fn drop_rates() {
        let cfg = small(ConditioningMode::CrossAttention);
        let mut rng = stream(0, Purpose::Dropout, 0);
        let mut ctx = context(1000, &cfg, 1);
        assert_eq!(drop_context(&mut ctx, 0.0, &mut rng).unwrap(), 0);
        assert!(ctx.keep.iter().all(|&k| k));
        assert_eq!(drop_context(&mut ctx, 1.0, &mut rng).unwrap(), 1000);
        assert!(drop_context(&mut ctx, 1.5, &mut rng).is_err());
        let mut total = 0;
        for _ in 0..100 {
            let mut c = ContextBatch {
                keep: vec![true; 1000],
                ..ctx.clone()
            };
            total += drop_context(&mut c, 0.1, &mut rng).unwrap();
        }
        let rate = total as f64 / 1e5;
        assert!((rate - 0.1).abs() < 0.005, "rate {rate}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small(ConditioningMode::Film);
        let m = Denoiser::init(&cfg, 2).unwrap();
        let mut ck = Checkpoint::from_denoiser(&m);
        ck.insert_params(EMA, &m.params);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.denoiser(false).unwrap(), m);
        assert_eq!(back.denoiser(true).unwrap(), m);
        buf.truncate(buf.len() - 2);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small(ConditioningMode::None);
        c.patch_size = 3;
        assert!(c.validate().is_err());
        let mut c = small(ConditioningMode::None);
        c.num_heads = 3;
        assert!(Params::init(&c, 0).is_err());
        let m = Denoiser::init(&small(ConditioningMode::None), 0).unwrap();
        assert!(m
            .predict(&Tensor::zeros(&[1, 4, 4, 3]).unwrap(), &[0.1, 0.2], None)
            .is_err());
    }
}

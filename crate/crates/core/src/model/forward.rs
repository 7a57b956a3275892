use std::collections::BTreeMap;

use rand::Rng;

use super::params::block_prefix;
use super::{ConditioningMode, DenoiserConfig, Params};
use crate::encoders::ContextBatch;
use crate::error::{shape_err, Error, Result};
use crate::nn::{
    attention, linear, patchify, plain_norm_params, self_attention, sinusoidal_embedding,
    unpatchify,
};
use crate::rng::StreamRng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-6;
const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

/// Parameters recorded on a tape, by name.
pub struct Bound<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    fn bind(tape: &'t Tape<T>, params: &Params, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let t = t.cast::<T>();
                let v = if trainable {
                    tape.param(&t)
                } else {
                    tape.constant(t)
                };
                (name.to_string(), v)
            })
            .collect();
        Self { tape, vars }
    }

    /// Parameters as gradient-tracking leaves.
    pub fn trainable(tape: &'t Tape<T>, params: &Params) -> Self {
        Self::bind(tape, params, true)
    }

    pub fn constants(tape: &'t Tape<T>, params: &Params) -> Self {
        Self::bind(tape, params, false)
    }

    /// Wraps already-recorded vars, e.g. `f64` leaves used for gradient
    /// checks.
    pub fn from_vars<'a>(
        tape: &'t Tape<T>,
        vars: impl IntoIterator<Item = (&'a str, Var<'t, T>)>,
    ) -> Self {
        Self {
            tape,
            vars: vars.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn var(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn lin(&self, x: Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
        linear(
            x,
            self.var(&format!("{name}.w"))?,
            Some(self.var(&format!("{name}.b"))?),
        )
    }

    /// `[B, 1...]` mask of kept examples and its complement.
    fn masks(&self, keep: &[bool], rank: usize) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let mut shape = vec![1; rank];
        shape[0] = keep.len();
        let m: Vec<T> = keep
            .iter()
            .map(|&k| if k { T::one() } else { T::zero() })
            .collect();
        let inv: Vec<T> = m.iter().map(|&v| T::one() - v).collect();
        Ok((
            self.tape.constant(Tensor::new(&shape, m)?),
            self.tape.constant(Tensor::new(&shape, inv)?),
        ))
    }

    /// Predicts `v̂ [B,H,W,C]` for `z [B,H,W,C]` at times `t` (one per example).
    ///
    /// Examples with `keep = false`, or all examples when `context` is
    /// `None`, use the learned null context.
    pub fn forward(
        &self,
        cfg: &DenoiserConfig,
        z: &Tensor<T>,
        t: &[f64],
        context: Option<&ContextBatch>,
    ) -> Result<Var<'t, T>> {
        let [h, w, c] = cfg.image.shape();
        let zs = z.shape();
        if zs.len() != 4 || zs[1..] != [h, w, c] {
            return Err(shape_err!("denoiser expects [B,{h},{w},{c}], got {zs:?}"));
        }
        let b = zs[0];
        if t.len() != b {
            return Err(shape_err!("{} timesteps for batch of {b}", t.len()));
        }
        let (tc, dc) = (cfg.context_tokens, cfg.context_dim);
        if let Some(ctx) = context {
            if ctx.len() != b || ctx.tokens.shape() != [b, tc, dc] || ctx.cls.shape() != [b, dc] {
                return Err(shape_err!(
                    "context tokens {:?} / cls {:?} for batch {b} with T_c={tc}, D_c={dc}",
                    ctx.tokens.shape(),
                    ctx.cls.shape()
                ));
            }
        }
        let tape = self.tape;
        let d = cfg.d_model;
        let eps = T::from_f64_lossy(NORM_EPS);
        let (ones, zeros) = plain_norm_params(tape, d)?;

        let x = tape.constant(patchify(z, cfg.patch_size)?);
        let mut hid = self.lin(x, "patch")?.add(self.var("pos")?)?;

        let scaled: Vec<f64> = t.iter().map(|v| v * TIME_SCALE).collect();
        let temb = tape.constant(sinusoidal_embedding::<T>(&scaled, d, MAX_PERIOD)?);
        let mut emb = self.lin(self.lin(temb, "time.fc1")?.silu()?, "time.fc2")?;

        let keep = match context {
            Some(ctx) => ctx.keep.clone(),
            None => vec![false; b],
        };
        let mut ctx_tokens = None;
        match cfg.mode {
            ConditioningMode::CrossAttention => {
                let real = match context {
                    Some(ctx) => ctx.tokens.cast::<T>(),
                    None => Tensor::zeros(&[b, tc, dc])?,
                };
                let (m, inv) = self.masks(&keep, 3)?;
                let mixed = tape
                    .constant(real)
                    .mul(m)?
                    .add(self.var("null.tokens")?.mul(inv)?)?;
                ctx_tokens = Some(mixed);
            }
            ConditioningMode::Film => {
                let real = match context {
                    Some(ctx) => ctx.cls.cast::<T>(),
                    None => Tensor::zeros(&[b, dc])?,
                };
                let (m, inv) = self.masks(&keep, 2)?;
                let cls = tape
                    .constant(real)
                    .mul(m)?
                    .add(self.var("null.cls")?.mul(inv)?)?;
                let (c1, c0) = plain_norm_params(tape, dc)?;
                emb = emb.add(self.lin(cls.layer_norm(c1, c0, eps)?, "film")?)?;
            }
            ConditioningMode::None => {}
        }
        let act = emb.silu()?;

        for i in 0..cfg.num_blocks {
            let p = block_prefix(i);
            let m = self
                .lin(act, &format!("{p}.mod"))?
                .reshape(&[b, 1, 4 * d])?;
            let modulate = |x: Var<'t, T>, k: usize| -> Result<Var<'t, T>> {
                let shift = m.slice(2, 2 * k * d, (2 * k + 1) * d)?;
                let scale = m.slice(2, (2 * k + 1) * d, (2 * k + 2) * d)?;
                x.layer_norm(ones, zeros, eps)?
                    .mul(scale.add_scalar(T::one())?)?
                    .add(shift)
            };

            let n = modulate(hid, 0)?;
            let a = self_attention(
                n,
                self.var(&format!("{p}.attn.qkv.w"))?,
                Some(self.var(&format!("{p}.attn.qkv.b"))?),
                cfg.num_heads,
            )?;
            hid = hid.add(self.lin(a, &format!("{p}.attn.out"))?)?;

            if let Some(ctx) = ctx_tokens {
                let n = hid.layer_norm(
                    self.var(&format!("{p}.xattn.norm.g"))?,
                    self.var(&format!("{p}.xattn.norm.b"))?,
                    eps,
                )?;
                let q = self.lin(n, &format!("{p}.xattn.q"))?;
                let kv = self.lin(ctx, &format!("{p}.xattn.kv"))?;
                let a = attention(q, kv.slice(2, 0, d)?, kv.slice(2, d, 2 * d)?, cfg.num_heads)?;
                hid = hid.add(self.lin(a, &format!("{p}.xattn.out"))?)?;
            }

            let n = modulate(hid, 1)?;
            let f = self.lin(
                self.lin(n, &format!("{p}.mlp.fc1"))?.gelu()?,
                &format!("{p}.mlp.fc2"),
            )?;
            hid = hid.add(f)?;
        }

        let n = hid.layer_norm(self.var("final.norm.g")?, self.var("final.norm.b")?, eps)?;
        let out = self.lin(n, "out")?;
        unpatchify(out, h, w, c, cfg.patch_size)
    }
}

/// Independently marks each example as dropped with probability `prob`;
/// returns the number of draws that dropped.
pub fn drop_context(ctx: &mut ContextBatch, prob: f64, rng: &mut StreamRng) -> Result<usize> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidArgument(format!(
            "drop probability {prob} outside [0, 1]"
        )));
    }
    let mut dropped = 0;
    for k in ctx.keep.iter_mut() {
        if rng.random::<f64>() < prob {
            *k = false;
            dropped += 1;
        }
    }
    Ok(dropped)
}

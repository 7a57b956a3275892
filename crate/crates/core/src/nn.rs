//! Layer helpers shared by the frozen encoder and the denoiser.

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// `x·w + b` over the last axis.
pub fn linear<'t, T: Scalar>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    b: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

/// Multi-head scaled dot-product attention.
///
/// `q: [B, Tq, D]`, `k, v: [B, Tk, D]` → `[B, Tq, D]`. No masking.
pub fn attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
) -> Result<Var<'t, T>> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || v.shape() != ks {
        return Err(shape_err!(
            "attention: q {qs:?}, k {ks:?}, v {:?}",
            v.shape()
        ));
    }
    let (b, tq, d) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    if heads == 0 || d % heads != 0 {
        return Err(shape_err!("width {d} not divisible by {heads} heads"));
    }
    let dh = d / heads;
    let split = |x: Var<'t, T>, t: usize| x.reshape(&[b, t, heads, dh])?.permute(&[0, 2, 1, 3]);
    let (qh, kh, vh) = (split(q, tq)?, split(k, tk)?, split(v, tk)?);
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let scores = qh.matmul(kh.transpose(2, 3)?)?.scale(scale)?;
    let weights = scores.softmax(3)?;
    weights
        .matmul(vh)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, tq, d])
}

/// Fused-projection self-attention: `qkv_w: [D, 3D]`.
pub fn self_attention<'t, T: Scalar>(
    x: Var<'t, T>,
    qkv_w: Var<'t, T>,
    qkv_b: Option<Var<'t, T>>,
    heads: usize,
) -> Result<Var<'t, T>> {
    let d = *x.shape().last().unwrap();
    let qkv = linear(x, qkv_w, qkv_b)?;
    let last = qkv.shape().len() - 1;
    let q = qkv.slice(last, 0, d)?;
    let k = qkv.slice(last, d, 2 * d)?;
    let v = qkv.slice(last, 2 * d, 3 * d)?;
    attention(q, k, v, heads)
}

/// `[B, H, W, C]` → `[B, (H/p)(W/p), p·p·C]`, row-major over patches.
pub fn patchify<T: Scalar>(x: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || patch == 0 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
        return Err(shape_err!("cannot patchify {s:?} with patch {patch}"));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(x.numel());
    let data = x.data();
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..patch {
                    let row = ((bi * h + py * patch + dy) * w + px * patch) * c;
                    out.extend_from_slice(&data[row..row + patch * c]);
                }
            }
        }
    }
    Tensor::new(&[b, gh * gw, patch * patch * c], out)
}

/// Inverse of [`patchify`] on the tape.
pub fn unpatchify<'t, T: Scalar>(
    x: Var<'t, T>,
    h: usize,
    w: usize,
    c: usize,
    patch: usize,
) -> Result<Var<'t, T>> {
    let s = x.shape();
    let b = s[0];
    let (gh, gw) = (h / patch, w / patch);
    if s != [b, gh * gw, patch * patch * c] {
        return Err(shape_err!(
            "unpatchify: {s:?} for {h}x{w}x{c} with patch {patch}"
        ));
    }
    x.reshape(&[b, gh, gw, patch, patch, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h, w, c])
}

/// Sinusoidal embedding `[B, dim]` of scalar inputs.
pub fn sinusoidal_embedding<T: Scalar>(
    values: &[f64],
    dim: usize,
    max_period: f64,
) -> Result<Tensor<T>> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(values.len() * dim);
    for &v in values {
        for i in 0..dim {
            let j = i % half.max(1);
            let freq = (-(max_period.ln()) * j as f64 / half.max(1) as f64).exp();
            let arg = v * freq;
            out.push(T::from_f64_lossy(if i < half {
                arg.cos()
            } else if i < 2 * half {
                arg.sin()
            } else {
                0.0
            }));
        }
    }
    Tensor::new(&[values.len(), dim], out)
}

/// Constant `ones`/`zeros` affine pair for parameter-free normalization.
pub fn plain_norm_params<T: Scalar>(
    tape: &Tape<T>,
    dim: usize,
) -> Result<(Var<'_, T>, Var<'_, T>)> {
    Ok((
        tape.constant(Tensor::ones(&[dim])?),
        tape.constant(Tensor::zeros(&[dim])?),
    ))
}

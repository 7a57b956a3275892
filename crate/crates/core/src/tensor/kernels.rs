//! Forward and backward kernels on flat row-major buffers.

use super::{numel, Scalar};
use crate::error::{shape_err, Result};

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps flat indices of a broadcast output back to an operand.
pub(crate) enum BroadcastMap {
    Identity,
    /// Operand shape is a suffix of the output shape.
    Modulo(usize),
    Table(Vec<usize>),
}

impl BroadcastMap {
    pub(crate) fn new(out: &[usize], input: &[usize]) -> Self {
        if out == input {
            return BroadcastMap::Identity;
        }
        let off = out.len() - input.len();
        let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if out[out.len() - trimmed.len()..] == trimmed[..] {
            return BroadcastMap::Modulo(numel(&trimmed).max(1));
        }
        let in_strides = strides(input);
        let mut eff = vec![0usize; out.len()];
        for (i, &d) in input.iter().enumerate() {
            if d != 1 {
                eff[off + i] = in_strides[i];
            }
        }
        let total = numel(out);
        let mut table = Vec::with_capacity(total);
        let mut idx = vec![0usize; out.len()];
        let mut pos = 0usize;
        for _ in 0..total {
            table.push(pos);
            for ax in (0..out.len()).rev() {
                idx[ax] += 1;
                pos += eff[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                pos -= eff[ax] * out[ax];
                idx[ax] = 0;
            }
        }
        BroadcastMap::Table(table)
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Identity => i,
            BroadcastMap::Modulo(n) => i % n,
            BroadcastMap::Table(t) => t[i],
        }
    }
}

/// Per-axis strides of `input` aligned to `out`, zero on broadcast axes.
fn aligned_strides(out: &[usize], input: &[usize]) -> Vec<usize> {
    let off = out.len() - input.len();
    let st = strides(input);
    let mut eff = vec![0usize; out.len()];
    for (i, &d) in input.iter().enumerate() {
        if d != 1 {
            eff[off + i] = st[i];
        }
    }
    eff
}

/// Visits every output row (last axis) as `(out, a, b, len, a_step, b_step)`
/// offsets.
#[inline]
fn walk_rows(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0, 1, 0, 0);
        return;
    }
    let last = rank - 1;
    let (len, la, lb) = (out[last], sa[last], sb[last]);
    let rows = numel(&out[..last]);
    let mut idx = vec![0usize; last];
    let (mut pa, mut pb, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..rows {
        f(o, pa, pb, len, la, lb);
        o += len;
        for ax in (0..last).rev() {
            idx[ax] += 1;
            pa += sa[ax];
            pb += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            pa -= sa[ax] * out[ax];
            pb -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Visits every output index with the matching operand offsets.
#[inline]
fn walk(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    walk_rows(out, sa, sb, |o, pa, pb, len, la, lb| {
        for j in 0..len {
            f(o + j, pa + j * la, pb + j * lb);
        }
    });
}

pub(crate) fn binary<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<T>, Vec<usize>)> {
    if a_shape == b_shape {
        return Ok((
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            a_shape.to_vec(),
        ));
    }
    let out_shape = broadcast_shapes(a_shape, b_shape)?;
    let mut out = Vec::with_capacity(numel(&out_shape));
    let (sa, sb) = (
        aligned_strides(&out_shape, a_shape),
        aligned_strides(&out_shape, b_shape),
    );
    walk_rows(&out_shape, &sa, &sb, |_, pa, pb, len, la, lb| {
        match (la, lb) {
            (1, 1) => out.extend(
                a[pa..pa + len]
                    .iter()
                    .zip(&b[pb..pb + len])
                    .map(|(&x, &y)| f(x, y)),
            ),
            (1, 0) => {
                let y = b[pb];
                out.extend(a[pa..pa + len].iter().map(|&x| f(x, y)));
            }
            (0, 1) => {
                let x = a[pa];
                out.extend(b[pb..pb + len].iter().map(|&y| f(x, y)));
            }
            _ => out.extend((0..len).map(|j| f(a[pa + j * la], b[pb + j * lb]))),
        }
    });
    Ok((out, out_shape))
}

/// Sums a broadcast-output gradient down to the operand's shape.
pub(crate) fn reduce_to<T: Scalar>(g: &[T], out_shape: &[usize], in_shape: &[usize]) -> Vec<T> {
    if out_shape == in_shape {
        return g.to_vec();
    }
    let mut acc = vec![T::zero(); numel(in_shape)];
    let s = aligned_strides(out_shape, in_shape);
    walk_rows(out_shape, &s, &s, |o, p, _, len, step, _| {
        let g = &g[o..o + len];
        if step == 0 {
            acc[p] = g.iter().fold(acc[p], |t, &v| t + v);
        } else {
            for (a, &v) in acc[p..p + len].iter_mut().zip(g) {
                *a = *a + v;
            }
        }
    });
    acc
}

/// Gradients of a broadcast product `a ⊙ b` for the requested operands.
pub(crate) fn mul_backward<T: Scalar>(
    g: &[T],
    out_shape: &[usize],
    (a, a_shape, need_a): (&[T], &[usize], bool),
    (b, b_shape, need_b): (&[T], &[usize], bool),
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut ga = need_a.then(|| vec![T::zero(); a.len()]);
    let mut gb = need_b.then(|| vec![T::zero(); b.len()]);
    let (sa, sb) = (
        aligned_strides(out_shape, a_shape),
        aligned_strides(out_shape, b_shape),
    );
    walk(out_shape, &sa, &sb, |o, ia, ib| {
        if let Some(ga) = ga.as_mut() {
            ga[ia] = ga[ia] + g[o] * b[ib];
        }
        if let Some(gb) = gb.as_mut() {
            gb[ib] = gb[ib] + g[o] * a[ia];
        }
    });
    (ga, gb)
}

/// Batched matmul layout: `a[.., m, k] · b[.., k, n]`.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Batch count of the output; zero batch dims means a single product.
    pub batches: usize,
    pub a_batch: Vec<usize>,
    pub b_batch: Vec<usize>,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub(crate) fn new(a_shape: &[usize], b_shape: &[usize]) -> Result<Self> {
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(shape_err!(
                "matmul needs rank >= 2, got {a_shape:?} and {b_shape:?}"
            ));
        }
        let (ra, rb) = (a_shape.len(), b_shape.len());
        let (m, k) = (a_shape[ra - 2], a_shape[ra - 1]);
        let (kb, n) = (b_shape[rb - 2], b_shape[rb - 1]);
        if k != kb {
            return Err(shape_err!(
                "matmul inner extents differ: {a_shape:?} · {b_shape:?}"
            ));
        }
        if rb == 2 {
            // Fold every leading dim of `a` into rows.
            let rows = numel(&a_shape[..ra - 1]);
            let mut out_shape = a_shape[..ra - 1].to_vec();
            out_shape.push(n);
            return Ok(Self {
                m: rows,
                k,
                n,
                batches: 1,
                a_batch: vec![0],
                b_batch: vec![0],
                out_shape,
            });
        }
        let (ab, bb) = (&a_shape[..ra - 2], &b_shape[..rb - 2]);
        let batch_shape = broadcast_shapes(ab, bb)?;
        let batches = numel(&batch_shape);
        let ma = BroadcastMap::new(&batch_shape, ab);
        let mb = BroadcastMap::new(&batch_shape, bb);
        let mut out_shape = batch_shape;
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            batches,
            a_batch: (0..batches).map(|i| ma.index(i)).collect(),
            b_batch: (0..batches).map(|i| mb.index(i)).collect(),
            out_shape,
        })
    }

    pub(crate) fn forward<T: Scalar>(&self, a: &[T], b: &[T]) -> Vec<T> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![T::zero(); self.batches * m * n];
        for bi in 0..self.batches {
            let (ia, ib) = (self.a_batch[bi], self.b_batch[bi]);
            T::gemm(
                m,
                k,
                n,
                &a[ia * m * k..(ia + 1) * m * k],
                k as isize,
                1,
                &b[ib * k * n..(ib + 1) * k * n],
                n as isize,
                1,
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
            );
        }
        out
    }

    /// `da += g·bᵀ` per batch, summed over broadcast batches.
    pub(crate) fn grad_a<T: Scalar>(&self, g: &[T], b: &[T], a_len: usize) -> Vec<T> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut da = vec![T::zero(); a_len];
        for bi in 0..self.batches {
            let (ia, ib) = (self.a_batch[bi], self.b_batch[bi]);
            T::gemm(
                m,
                n,
                k,
                &g[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
                &b[ib * k * n..(ib + 1) * k * n],
                1,
                n as isize,
                T::one(),
                &mut da[ia * m * k..(ia + 1) * m * k],
                k as isize,
                1,
            );
        }
        da
    }

    /// `db += aᵀ·g` per batch, summed over broadcast batches.
    pub(crate) fn grad_b<T: Scalar>(&self, g: &[T], a: &[T], b_len: usize) -> Vec<T> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut db = vec![T::zero(); b_len];
        for bi in 0..self.batches {
            let (ia, ib) = (self.a_batch[bi], self.b_batch[bi]);
            T::gemm(
                k,
                m,
                n,
                &a[ia * m * k..(ia + 1) * m * k],
                1,
                k as isize,
                &g[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
                T::one(),
                &mut db[ib * k * n..(ib + 1) * k * n],
                n as isize,
                1,
            );
        }
        db
    }
}

/// `(outer, len, inner)` decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub(crate) fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    if inner == 1 {
        for (xr, yr) in x.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
            let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (y, &v) in yr.iter_mut().zip(xr) {
                *y = (v - max).exp();
                total = total + *y;
            }
            let inv = T::one() / total;
            yr.iter_mut().for_each(|y| *y = *y * inv);
        }
        return out;
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    g: &[T],
    shape: &[usize],
    axis: usize,
) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    if inner == 1 {
        for ((yr, gr), dr) in y
            .chunks_exact(len)
            .zip(g.chunks_exact(len))
            .zip(dx.chunks_exact_mut(len))
        {
            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for ((d, &a), &b) in dr.iter_mut().zip(yr).zip(gr) {
                *d = a * (b - dot);
            }
        }
        return dx;
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    dx
}

pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Row-wise normalization over the last axis followed by `gamma`, `beta`.
pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    dim: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, NormStats<T>) {
    let rows = x.len() / dim;
    let inv_dim = T::one() / T::from_usize(dim).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().copied().sum::<T>() * inv_dim;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_dim;
        let rstd = T::one() / (var + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            out[r * dim + j] = (v - mean) * rstd * gamma[j] + beta[j];
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    (out, stats)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &[T],
    g: &[T],
    dim: usize,
    gamma: &[T],
    stats: &NormStats<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / dim;
    let inv_dim = T::one() / T::from_usize(dim).unwrap();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); dim];
    let mut dbeta = vec![T::zero(); dim];
    let mut xhat = vec![T::zero(); dim];
    let mut dxhat = vec![T::zero(); dim];
    for r in 0..rows {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        let (mut sum_d, mut sum_dx) = (T::zero(), T::zero());
        for j in 0..dim {
            let i = r * dim + j;
            xhat[j] = (x[i] - mean) * rstd;
            dxhat[j] = g[i] * gamma[j];
            dgamma[j] = dgamma[j] + g[i] * xhat[j];
            dbeta[j] = dbeta[j] + g[i];
            sum_d = sum_d + dxhat[j];
            sum_dx = sum_dx + dxhat[j] * xhat[j];
        }
        let (mean_d, mean_dx) = (sum_d * inv_dim, sum_dx * inv_dim);
        for j in 0..dim {
            dx[r * dim + j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    (dx, dgamma, dbeta)
}

// tanh-approximate GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// `1 − 2/(e^{2x} + 1)`; cheaper than libm `tanh` and saturates cleanly.
#[inline]
fn tanh<T: Scalar>(x: T) -> T {
    let two = T::one() + T::one();
    T::one() - two / ((x + x).exp() + T::one())
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + tanh(c * (x + a * x * x * x)))
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let th = tanh(c * (x + a * x * x * x));
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub(crate) fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; shape.len()];
    let mut pos = 0usize;
    let rank = shape.len();
    let last = rank - 1;
    let (last_len, last_stride) = (out_shape[last], eff[last]);
    let outer = x.len() / last_len;
    for _ in 0..outer {
        let mut p = pos;
        for _ in 0..last_len {
            out.push(x[p]);
            p += last_stride;
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            pos += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            pos -= eff[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

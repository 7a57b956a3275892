use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, MatmulPlan, NormStats};
use super::{numel, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: NormStats<T>,
    },
    Gelu(usize),
    Silu(usize),
    Sum {
        x: usize,
        axis: usize,
    },
    Mean {
        x: usize,
        axis: usize,
    },
    SumAll(usize),
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records primitive operations in execution order.
///
/// Node ids are assigned in push order, so every node's inputs precede it
/// and the backward pass is a plain reverse sweep.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data: Rc::new(data),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a leaf; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    pub fn concat(&self, xs: &[Var<'_, T>], axis: usize) -> Result<Var<'_, T>> {
        let first = xs.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let (out_shape, data, needs) = {
            let nodes = self.nodes.borrow();
            let base = &nodes[first.id].shape;
            if axis >= base.len() {
                return Err(shape_err!("concat axis {axis} for rank {}", base.len()));
            }
            let mut out_shape = base.clone();
            out_shape[axis] = 0;
            for v in xs {
                let s = &nodes[v.id].shape;
                let same_rest = s.len() == base.len()
                    && s.iter()
                        .zip(base)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !same_rest {
                    return Err(shape_err!("concat: {s:?} vs {base:?} on axis {axis}"));
                }
                out_shape[axis] += s[axis];
            }
            let (outer, _, inner) = kernels::split_axis(&out_shape, axis);
            let mut data = Vec::with_capacity(numel(&out_shape));
            for o in 0..outer {
                for v in xs {
                    let n = &nodes[v.id];
                    let chunk = n.shape[axis] * inner;
                    data.extend_from_slice(&n.data[o * chunk..(o + 1) * chunk]);
                }
            }
            let needs = xs.iter().any(|v| nodes[v.id].needs_grad);
            (out_shape, data, needs)
        };
        let ids = xs.iter().map(|v| v.id).collect();
        Ok(self.push(out_shape, data, Op::Concat { xs: ids, axis }, needs))
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Returns fresh gradients for every node that depends on a
    /// `requires_grad` leaf. Calling it twice yields the same gradients twice;
    /// accumulation across calls is done by [`Tensor::accumulate_grad`].
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.data.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);

        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
            match &mut grads[id] {
                Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x = *x + y),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let g = match (&node.op, grads[id].as_ref()) {
                (Op::Leaf, _) | (_, None) => continue,
                (_, Some(g)) => g.clone(),
            };
            let needs = |i: usize| nodes[i].needs_grad;
            let shape_of = |i: usize| nodes[i].shape.as_slice();
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) | Op::Sub(a, b) => {
                    if needs(*a) {
                        acc(
                            &mut grads,
                            *a,
                            kernels::reduce_to(&g, &node.shape, shape_of(*a)),
                        );
                    }
                    if needs(*b) {
                        let mut gb = kernels::reduce_to(&g, &node.shape, shape_of(*b));
                        if matches!(node.op, Op::Sub(..)) {
                            gb.iter_mut().for_each(|x| *x = -*x);
                        }
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    let (na, nb) = (&nodes[*a], &nodes[*b]);
                    let (ga, gb) = kernels::mul_backward(
                        &g,
                        &node.shape,
                        (&na.data, &na.shape, needs(*a)),
                        (&nb.data, &nb.shape, needs(*b)),
                    );
                    if let Some(ga) = ga {
                        acc(&mut grads, *a, ga);
                    }
                    if let Some(gb) = gb {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g.iter().map(|&v| v * *s).collect()),
                Op::AddScalar(x) | Op::Reshape(x) => acc(&mut grads, *x, g),
                Op::MatMul(a, b) => {
                    let (na, nb) = (&nodes[*a], &nodes[*b]);
                    let plan = MatmulPlan::new(&na.shape, &nb.shape)?;
                    if needs(*a) {
                        acc(&mut grads, *a, plan.grad_a(&g, &nb.data, na.data.len()));
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, plan.grad_b(&g, &na.data, nb.data.len()));
                    }
                }
                Op::Softmax { x, axis } => {
                    let dx = kernels::softmax_backward(&node.data, &g, &node.shape, *axis);
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let nx = &nodes[*x];
                    let dim = *nx.shape.last().unwrap();
                    let (dx, dg, db) =
                        kernels::layer_norm_backward(&nx.data, &g, dim, &nodes[*gamma].data, stats);
                    if needs(*x) {
                        acc(&mut grads, *x, dx);
                    }
                    if needs(*gamma) {
                        acc(&mut grads, *gamma, dg);
                    }
                    if needs(*beta) {
                        acc(&mut grads, *beta, db);
                    }
                }
                Op::Gelu(x) => {
                    let xs = &nodes[*x].data;
                    acc(
                        &mut grads,
                        *x,
                        g.iter()
                            .zip(xs.iter())
                            .map(|(&gi, &v)| gi * kernels::gelu_grad(v))
                            .collect(),
                    );
                }
                Op::Silu(x) => {
                    let xs = &nodes[*x].data;
                    acc(
                        &mut grads,
                        *x,
                        g.iter()
                            .zip(xs.iter())
                            .map(|(&gi, &v)| gi * kernels::silu_grad(v))
                            .collect(),
                    );
                }
                Op::Sum { x, axis } | Op::Mean { x, axis } => {
                    let nx = &nodes[*x];
                    let (outer, len, inner) = kernels::split_axis(&nx.shape, *axis);
                    let factor = match node.op {
                        Op::Mean { .. } => T::one() / T::from_usize(len).unwrap(),
                        _ => T::one(),
                    };
                    let mut dx = vec![T::zero(); nx.data.len()];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                dx[o * len * inner + j * inner + i] = g[o * inner + i] * factor;
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SumAll(x) => {
                    let n = nodes[*x].data.len();
                    acc(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Permute { x, perm } => {
                    let (dx, _) = kernels::permute(&g, &node.shape, &kernels::inverse_perm(perm));
                    acc(&mut grads, *x, dx);
                }
                Op::Concat { xs, axis } => {
                    let (outer, _, inner) = kernels::split_axis(&node.shape, *axis);
                    let total = node.shape[*axis] * inner;
                    let mut offset = 0;
                    for &xi in xs {
                        let chunk = nodes[xi].shape[*axis] * inner;
                        if needs(xi) {
                            let mut dx = Vec::with_capacity(nodes[xi].data.len());
                            for o in 0..outer {
                                let s = o * total + offset;
                                dx.extend_from_slice(&g[s..s + chunk]);
                            }
                            acc(&mut grads, xi, dx);
                        }
                        offset += chunk;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let nx = &nodes[*x];
                    let (outer, len, inner) = kernels::split_axis(&nx.shape, *axis);
                    let width = node.shape[*axis] * inner;
                    let mut dx = vec![T::zero(); nx.data.len()];
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        dx[dst..dst + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                    }
                    acc(&mut grads, *x, dx);
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Output of [`Tape::backward`].
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.get(v)?;
        Tensor::new(&self.shapes[v.id], g.to_vec()).ok()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn data(&self) -> Rc<Vec<T>> {
        self.tape.nodes.borrow()[self.id].data.clone()
    }

    pub fn value(&self) -> Tensor<T> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.data.as_ref().clone()).expect("recorded shape")
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn unary(
        self,
        f: impl Fn(&[T], &[usize]) -> Result<(Vec<T>, Vec<usize>, Op<T>)>,
    ) -> Result<Self> {
        let (data, shape, op, needs) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let (d, s, op) = f(&n.data, &n.shape)?;
            (d, s, op, n.needs_grad)
        };
        Ok(self.tape.push(shape, data, op, needs))
    }

    fn binary(self, other: Var<'t, T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Self> {
        let (data, shape, needs) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (d, s) = kernels::binary(&a.data, &a.shape, &b.data, &b.shape, f)?;
            (d, s, a.needs_grad || b.needs_grad)
        };
        Ok(self.tape.push(shape, data, op, needs))
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, s: T) -> Result<Self> {
        let id = self.id;
        self.unary(|x, shape| {
            Ok((
                x.iter().map(|&v| v * s).collect(),
                shape.to_vec(),
                Op::Scale(id, s),
            ))
        })
    }

    pub fn add_scalar(self, s: T) -> Result<Self> {
        let id = self.id;
        self.unary(|x, shape| {
            Ok((
                x.iter().map(|&v| v + s).collect(),
                shape.to_vec(),
                Op::AddScalar(id),
            ))
        })
    }

    pub fn square(self) -> Result<Self> {
        self.mul(self)
    }

    /// `[.., m, k] · [.., k, n]`; a rank-2 right operand is shared by every
    /// leading batch of the left one.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Self> {
        let (data, shape, needs) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let plan = MatmulPlan::new(&a.shape, &b.shape)?;
            (
                plan.forward(&a.data, &b.data),
                plan.out_shape,
                a.needs_grad || b.needs_grad,
            )
        };
        Ok(self
            .tape
            .push(shape, data, Op::MatMul(self.id, other.id), needs))
    }

    pub fn softmax(self, axis: usize) -> Result<Self> {
        let id = self.id;
        self.unary(|x, shape| {
            check_axis(shape, axis)?;
            Ok((
                kernels::softmax(x, shape, axis),
                shape.to_vec(),
                Op::Softmax { x: id, axis },
            ))
        })
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Self> {
        let (data, shape, stats, needs) = {
            let nodes = self.tape.nodes.borrow();
            let (x, g, b) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
            let dim = *x.shape.last().unwrap();
            if g.shape != [dim] || b.shape != [dim] {
                return Err(shape_err!(
                    "layer_norm affine shapes {:?}/{:?} for last dim {dim}",
                    g.shape,
                    b.shape
                ));
            }
            let (out, stats) = kernels::layer_norm(&x.data, dim, &g.data, &b.data, eps);
            (
                out,
                x.shape.clone(),
                stats,
                x.needs_grad || g.needs_grad || b.needs_grad,
            )
        };
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            stats,
        };
        Ok(self.tape.push(shape, data, op, needs))
    }

    pub fn gelu(self) -> Result<Self> {
        let id = self.id;
        self.unary(|x, shape| {
            Ok((
                x.iter().map(|&v| kernels::gelu(v)).collect(),
                shape.to_vec(),
                Op::Gelu(id),
            ))
        })
    }

    pub fn silu(self) -> Result<Self> {
        let id = self.id;
        self.unary(|x, shape| {
            Ok((
                x.iter().map(|&v| kernels::silu(v)).collect(),
                shape.to_vec(),
                Op::Silu(id),
            ))
        })
    }

    fn reduce(self, axis: usize, keepdim: bool, mean: bool) -> Result<Self> {
        let id = self.id;
        self.unary(|x, shape| {
            check_axis(shape, axis)?;
            let (outer, len, inner) = kernels::split_axis(shape, axis);
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] =
                            out[o * inner + i] + x[o * len * inner + j * inner + i];
                    }
                }
            }
            if mean {
                let inv = T::one() / T::from_usize(len).unwrap();
                out.iter_mut().for_each(|v| *v = *v * inv);
            }
            let mut s = shape.to_vec();
            if keepdim || s.len() == 1 {
                s[axis] = 1;
            } else {
                s.remove(axis);
            }
            let op = if mean {
                Op::Mean { x: id, axis }
            } else {
                Op::Sum { x: id, axis }
            };
            Ok((out, s, op))
        })
    }

    pub fn sum(self, axis: usize, keepdim: bool) -> Result<Self> {
        self.reduce(axis, keepdim, false)
    }

    pub fn mean(self, axis: usize, keepdim: bool) -> Result<Self> {
        self.reduce(axis, keepdim, true)
    }

    pub fn sum_all(self) -> Result<Self> {
        let id = self.id;
        self.unary(|x, _| Ok((vec![x.iter().copied().sum()], vec![1], Op::SumAll(id))))
    }

    pub fn mean_all(self) -> Result<Self> {
        let n = T::from_usize(self.tape.nodes.borrow()[self.id].data.len()).unwrap();
        self.sum_all()?.scale(T::one() / n)
    }

    pub fn reshape(self, new_shape: &[usize]) -> Result<Self> {
        let (data, needs, old) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.data.clone(), n.needs_grad, n.shape.clone())
        };
        if numel(new_shape) != data.len() || new_shape.contains(&0) {
            return Err(shape_err!("cannot reshape {old:?} to {new_shape:?}"));
        }
        let mut nodes = self.tape.nodes.borrow_mut();
        nodes.push(Node {
            shape: new_shape.to_vec(),
            data,
            op: Op::Reshape(self.id),
            needs_grad: needs,
        });
        Ok(Var {
            tape: self.tape,
            id: nodes.len() - 1,
        })
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        let id = self.id;
        self.unary(|x, shape| {
            let mut seen = vec![false; shape.len()];
            if perm.len() != shape.len()
                || perm
                    .iter()
                    .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
            {
                return Err(shape_err!(
                    "invalid permutation {perm:?} for rank {}",
                    shape.len()
                ));
            }
            let (out, s) = kernels::permute(x, shape, perm);
            Ok((
                out,
                s,
                Op::Permute {
                    x: id,
                    perm: perm.to_vec(),
                },
            ))
        })
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Self> {
        let rank = self.tape.nodes.borrow()[self.id].shape.len();
        if a >= rank || b >= rank {
            return Err(shape_err!("transpose axes ({a},{b}) for rank {rank}"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Self> {
        let id = self.id;
        self.unary(|x, shape| {
            check_axis(shape, axis)?;
            if start >= end || end > shape[axis] {
                return Err(shape_err!("slice {start}..{end} of extent {}", shape[axis]));
            }
            let (outer, len, inner) = kernels::split_axis(shape, axis);
            let width = (end - start) * inner;
            let mut out = Vec::with_capacity(outer * width);
            for o in 0..outer {
                let s = o * len * inner + start * inner;
                out.extend_from_slice(&x[s..s + width]);
            }
            let mut s = shape.to_vec();
            s[axis] = end - start;
            Ok((out, s, Op::Slice { x: id, axis, start }))
        })
    }
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        Err(Error::Shape(format!(
            "axis {axis} out of range for shape {shape:?}"
        )))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[2], &[1.0, 2.0]));
        let b = tape.constant(t64(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zero_has_zero_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.param(&t64(&[3], &[1.0, -2.0, 5.0]));
        let z = tape.constant(t64(&[1], &[0.0]));
        let y = x.mul(z).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let g = tape.backward(y.sum_all().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_by_hand() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t64(&[2, 1], &[1.0, 1.0]));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.value().data(), &[3.0, 7.0]);

        let eye = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = tape.constant(t64(&[2, 1], &[5.0, -3.0]));
        assert_eq!(eye.matmul(v).unwrap().value().data(), &[5.0, -3.0]);
    }

    #[test]
    fn matmul_inner_mismatch_errors() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        assert!(matches!(a.matmul(b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_closed_form() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2], &[0.0, 3f64.ln()]));
        let y = x.softmax(0).unwrap().value();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);

        let c = tape
            .constant(t64(&[1, 4], &[7.0; 4]))
            .softmax(1)
            .unwrap()
            .value();
        assert!(c.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let base = tape
            .constant(t64(&[1, 3], &[0.3, -1.0, 2.0]))
            .softmax(1)
            .unwrap()
            .value();
        let shifted = tape
            .constant(t64(&[1, 3], &[10.3, 9.0, 12.0]))
            .softmax(1)
            .unwrap()
            .value();
        assert!(base.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::<f64>::new();
        let ones = tape.constant(t64(&[2], &[1.0, 1.0]));
        let zeros = tape.constant(t64(&[2], &[0.0, 0.0]));
        let y = tape
            .constant(t64(&[1, 2], &[1.0, 3.0]))
            .layer_norm(ones, zeros, 1e-12)
            .unwrap()
            .value();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

        let ones3 = tape.constant(t64(&[3], &[1.0; 3]));
        let zeros3 = tape.constant(t64(&[3], &[0.0; 3]));
        let flat = tape
            .constant(t64(&[1, 3], &[4.0; 3]))
            .layer_norm(ones3, zeros3, 1e-6)
            .unwrap()
            .value();
        assert!(flat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reductions_and_gelu() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2], &[2.0, 4.0]));
        assert_eq!(x.mean(0, false).unwrap().value().data(), &[3.0]);
        let z = tape.constant(t64(&[1], &[0.0]));
        assert_eq!(z.gelu().unwrap().value().data(), &[0.0]);
    }

    #[test]
    fn backward_simple_rules() {
        let tape = Tape::<f64>::new();
        let x = tape.param(&t64(&[2], &[1.0, 2.0]));
        let g = tape.backward(x.sum_all().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0]);

        let tape = Tape::<f64>::new();
        let x = tape.param(&t64(&[2], &[1.0, 2.0]));
        let g = tape
            .backward(x.square().unwrap().sum_all().unwrap())
            .unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.param(&t64(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::<f64>::new();
        let a = tape.param(&t64(&[2, 1], &[1.0, 2.0]));
        let b = tape.param(&t64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let back = c.slice(1, 1, 3).unwrap();
        assert_eq!(back.value(), b.value());
        let g = tape.backward(back.sum_all().unwrap()).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.0, 0.0]);
        assert_eq!(g.get(b).unwrap(), &[1.0; 4]);
    }
}

//! Central finite-difference checks for every autodiff primitive and the
//! full denoiser.
//!
//! The 64-bit check differentiates and perturbs in `f64`. The 32-bit check
//! compares gradients computed in `f32` with central differences of the same
//! function evaluated in `f64`, so the reference is not swamped by `f32`
//! rounding in the differences.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use varidiff::data::ImageConfig;
use varidiff::encoders::ContextBatch;
use varidiff::model::{Bound, ConditioningMode, DenoiserConfig, Params};
use varidiff::nn::{attention, linear, self_attention, unpatchify};
use varidiff::{Result, Scalar, Tape, Tensor, Var};

pub const TOL_F64: f64 = 1e-5;
pub const TOL_F32: f64 = 1e-3;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prim {
    Add,
    AddBroadcast,
    Sub,
    MulBroadcast,
    Scale,
    AddScalar,
    Square,
    Matmul,
    MatmulBatched,
    SoftmaxLast,
    SoftmaxMiddle,
    LayerNorm,
    Gelu,
    Silu,
    Sum,
    Mean,
    SumAll,
    MeanAll,
    Reshape,
    Permute,
    Transpose,
    Slice,
    Concat,
    Linear,
    Attention,
    SelfAttention,
    Unpatchify,
}

pub const ALL_PRIMS: &[Prim] = &[
    Prim::Add,
    Prim::AddBroadcast,
    Prim::Sub,
    Prim::MulBroadcast,
    Prim::Scale,
    Prim::AddScalar,
    Prim::Square,
    Prim::Matmul,
    Prim::MatmulBatched,
    Prim::SoftmaxLast,
    Prim::SoftmaxMiddle,
    Prim::LayerNorm,
    Prim::Gelu,
    Prim::Silu,
    Prim::Sum,
    Prim::Mean,
    Prim::SumAll,
    Prim::MeanAll,
    Prim::Reshape,
    Prim::Permute,
    Prim::Transpose,
    Prim::Slice,
    Prim::Concat,
    Prim::Linear,
    Prim::Attention,
    Prim::SelfAttention,
    Prim::Unpatchify,
];

impl Prim {
    pub fn input_shapes(self) -> Vec<Vec<usize>> {
        use Prim::*;
        match self {
            Add | Sub => vec![vec![2, 3], vec![2, 3]],
            AddBroadcast => vec![vec![2, 3, 4], vec![4]],
            MulBroadcast => vec![vec![2, 3, 4], vec![2, 1, 4]],
            Scale | AddScalar | Square | Gelu | Silu | SumAll | MeanAll | Reshape => {
                vec![vec![3, 4]]
            }
            Matmul => vec![vec![3, 4], vec![4, 2]],
            MatmulBatched => vec![vec![2, 3, 4], vec![4, 5]],
            SoftmaxLast | SoftmaxMiddle | Sum | Mean | Permute | Transpose | Slice => {
                vec![vec![2, 3, 4]]
            }
            LayerNorm => vec![vec![2, 3, 5], vec![5], vec![5]],
            Concat => vec![vec![2, 3], vec![2, 2]],
            Linear => vec![vec![2, 3, 4], vec![4, 5], vec![5]],
            Attention => vec![vec![2, 3, 4], vec![2, 5, 4], vec![2, 5, 4]],
            SelfAttention => vec![vec![2, 3, 4], vec![4, 12], vec![12]],
            Unpatchify => vec![vec![1, 4, 12]],
        }
    }

    pub fn apply<'t, T: Scalar>(self, tape: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        use Prim::*;
        let c = |v: f64| T::from_f64_lossy(v);
        match self {
            Add | AddBroadcast => x[0].add(x[1]),
            Sub => x[0].sub(x[1]),
            MulBroadcast => x[0].mul(x[1]),
            Scale => x[0].scale(c(-1.7)),
            AddScalar => x[0].add_scalar(c(0.3)),
            Square => x[0].square(),
            Matmul | MatmulBatched => x[0].matmul(x[1]),
            SoftmaxLast => x[0].softmax(2),
            SoftmaxMiddle => x[0].softmax(1),
            LayerNorm => x[0].layer_norm(x[1], x[2], c(1e-5)),
            Gelu => x[0].gelu(),
            Silu => x[0].silu(),
            Sum => x[0].sum(1, false),
            Mean => x[0].mean(2, true),
            SumAll => x[0].sum_all(),
            MeanAll => x[0].mean_all(),
            Reshape => x[0].reshape(&[2, 6]),
            Permute => x[0].permute(&[2, 0, 1]),
            Transpose => x[0].transpose(0, 2),
            Slice => x[0].slice(2, 1, 3),
            Concat => tape.concat(&[x[0], x[1]], 1),
            Linear => linear(x[0], x[1], Some(x[2])),
            Attention => attention(x[0], x[1], x[2], 2),
            SelfAttention => self_attention(x[0], x[1], Some(x[2]), 2),
            Unpatchify => unpatchify(x[0], 4, 4, 3, 2),
        }
    }
}

/// Anything differentiable with respect to a list of named tensors.
pub trait Function {
    fn inputs(&self) -> Vec<(String, Tensor<f64>)>;
    fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        inputs: &[Var<'t, T>],
    ) -> Result<Var<'t, T>>;
    /// Coordinates to check per input; `None` checks all of them.
    fn coords_per_input(&self) -> Option<usize> {
        None
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| rng.random_range(-1.0..1.0) * scale)
            .collect(),
    )
    .unwrap()
}

pub struct PrimCase {
    pub prim: Prim,
    pub seed: u64,
}

impl Function for PrimCase {
    fn inputs(&self) -> Vec<(String, Tensor<f64>)> {
        let mut r = rng(self.seed);
        self.prim
            .input_shapes()
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("x{i}"), random_tensor(&mut r, s, 1.0)))
            .collect()
    }

    fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        inputs: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        self.prim.apply(tape, inputs)
    }
}

/// `Σ out ⊙ R` for a fixed random `R`, accumulated in `f64`.
fn projected<T: Scalar>(out: &Tensor<T>, r: &[f64]) -> f64 {
    out.data()
        .iter()
        .zip(r)
        .map(|(&o, &w)| o.as_f64() * w)
        .sum()
}

fn projection(f: &impl Function) -> Vec<f64> {
    let tape = Tape::<f64>::new();
    let vars: Vec<_> = f
        .inputs()
        .into_iter()
        .map(|(_, t)| tape.constant(t))
        .collect();
    let n = f.forward(&tape, &vars).unwrap().value().numel();
    let mut r = rng(0xfeed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn eval_f64(f: &impl Function, inputs: &[Tensor<f64>], r: &[f64]) -> f64 {
    let tape = Tape::<f64>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    projected(&f.forward(&tape, &vars).unwrap().value(), r)
}

fn analytic<T: Scalar>(f: &impl Function, inputs: &[Tensor<f64>], r: &[f64]) -> Vec<Vec<f64>> {
    let tape = Tape::<T>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(&t.cast::<T>())).collect();
    let out = f.forward(&tape, &vars).unwrap();
    let rv = tape.constant(Tensor::from_f64(&out.shape(), r).unwrap());
    let loss = out.mul(rv).unwrap().sum_all().unwrap();
    let grads = tape.backward(loss).unwrap();
    vars.iter()
        .map(|&v| match grads.get(v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; v.value().numel()],
        })
        .collect()
}

/// Worst norm-wise relative error over inputs, and the name of that input.
pub fn max_rel_error<T: Scalar>(f: &impl Function) -> (f64, String) {
    let named = f.inputs();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let base: Vec<Tensor<f64>> = named
        .into_iter()
        .map(|(_, t)| t.cast::<T>().cast::<f64>())
        .collect();
    let r = projection(f);
    let grads = analytic::<T>(f, &base, &r);
    let mut pick = rng(0xc0de);
    let mut worst = (0.0, String::new());
    for (i, g) in grads.iter().enumerate() {
        let n = base[i].numel();
        let coords: Vec<usize> = match f.coords_per_input() {
            Some(k) if k < n => (0..k).map(|_| pick.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &j in &coords {
            let mut plus = base.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = base.clone();
            minus[i].data_mut()[j] -= STEP;
            let fd = (eval_f64(f, &plus, &r) - eval_f64(f, &minus, &r)) / (2.0 * STEP);
            diff2 += (g[j] - fd).powi(2);
            a2 += g[j] * g[j];
            n2 += fd * fd;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(1e-8);
        let err = diff2.sqrt() / denom;
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, names[i].clone());
        }
    }
    worst
}

/// Small denoiser with its output layer woken up so that every parameter
/// receives gradient.
pub struct DenoiserCase {
    pub cfg: DenoiserConfig,
    pub params: BTreeMap<String, Tensor<f64>>,
    pub z: Tensor<f64>,
    pub t: Vec<f64>,
    pub context: ContextBatch,
}

impl DenoiserCase {
    pub fn new(mode: ConditioningMode, seed: u64) -> Self {
        let cfg = DenoiserConfig {
            image: ImageConfig {
                height: 4,
                width: 4,
                channels: 3,
            },
            patch_size: 2,
            d_model: 8,
            num_blocks: 2,
            num_heads: 2,
            mode,
            context_tokens: 3,
            context_dim: 5,
            time_dim: 6,
            mlp_ratio: 2,
            context_dropout: 0.0,
        };
        let params = Params::init(&cfg, seed).unwrap();
        let mut r = rng(seed ^ 0x5eed);
        let params = params
            .iter()
            .map(|(name, t)| {
                let mut t = t.cast::<f64>();
                // zero-initialized tensors would hide upstream gradients
                if t.data().iter().all(|&v| v == 0.0) {
                    t = random_tensor(&mut r, t.shape(), 0.3);
                }
                (name.to_string(), t)
            })
            .collect();
        let z = random_tensor(&mut r, &[2, 4, 4, 3], 1.0);
        let tokens = random_tensor(&mut r, &[2, 3, 5], 1.0).cast::<f32>();
        let cls = random_tensor(&mut r, &[2, 5], 1.0).cast::<f32>();
        Self {
            cfg,
            params,
            z,
            t: vec![0.3, 0.8],
            context: ContextBatch {
                tokens,
                cls,
                keep: vec![true, false],
            },
        }
    }
}

impl Function for DenoiserCase {
    fn inputs(&self) -> Vec<(String, Tensor<f64>)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        inputs: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        let bound = Bound::from_vars(
            tape,
            self.params
                .keys()
                .map(String::as_str)
                .zip(inputs.iter().copied()),
        );
        bound.forward(&self.cfg, &self.z.cast::<T>(), &self.t, Some(&self.context))
    }

    fn coords_per_input(&self) -> Option<usize> {
        Some(4)
    }
}

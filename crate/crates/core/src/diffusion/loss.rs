use rand_distr::{Distribution, Uniform};

use super::process::forward_diffuse_batch;
use super::{ScheduleConfig, SchedulePoint};
use crate::error::{shape_err, Error, Result};
use crate::rng::{normal_vec_f64, StreamRng};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Space in which the squared residual is measured. The model always
/// predicts `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossSpace {
    /// `‖ε − ε̂‖²`, i.e. `SNR(t)·‖x − x̂‖²`.
    #[default]
    Epsilon,
    /// Unweighted `‖x − x̂‖²`.
    Data,
}

/// Timesteps and noise for one loss evaluation.
#[derive(Debug, Clone)]
pub struct NoiseDraw<T: Scalar> {
    pub points: Vec<SchedulePoint>,
    pub eps: Tensor<T>,
}

impl<T: Scalar> NoiseDraw<T> {
    /// `t ~ U(t_min, t_max)` per example and `ε ~ N(0, I)`.
    pub fn sample(
        schedule: &ScheduleConfig,
        shape: &[usize],
        time_rng: &mut StreamRng,
        noise_rng: &mut StreamRng,
    ) -> Result<Self> {
        let batch = shape[0];
        let dist = Uniform::new_inclusive(schedule.t_min, schedule.t_max)
            .map_err(|e| Error::Config(e.to_string()))?;
        let points = (0..batch)
            .map(|_| schedule.at(dist.sample(time_rng)))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product();
        let eps = Tensor::from_f64(shape, &normal_vec_f64(noise_rng, n))?;
        Ok(Self { points, eps })
    }

    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.t).collect()
    }
}

/// `[B, 1, …, 1]` coefficient tensor for broadcasting against a batch.
fn coeff<T: Scalar>(
    points: &[SchedulePoint],
    rank: usize,
    f: impl Fn(&SchedulePoint) -> f64,
) -> Result<Tensor<T>> {
    let mut shape = vec![1; rank];
    shape[0] = points.len();
    Tensor::from_f64(&shape, &points.iter().map(f).collect::<Vec<_>>())
}

/// Records the diffusion loss on `tape` and returns the scalar node.
///
/// `predict_v` receives the noised batch `z_t` and the per-example times and
/// returns the model's `v̂` node. The result is the mean over all elements of
/// the squared residual in the configured space.
pub fn diffusion_loss_on<'t, T, F>(
    tape: &'t Tape<T>,
    x: &Tensor<T>,
    draw: &NoiseDraw<T>,
    space: LossSpace,
    predict_v: F,
) -> Result<Var<'t, T>>
where
    T: Scalar,
    F: FnOnce(&Tensor<T>, &[f64]) -> Result<Var<'t, T>>,
{
    if x.shape()[0] != draw.points.len() || x.shape() != draw.eps.shape() {
        return Err(shape_err!(
            "loss draw {:?} with {} times for batch {:?}",
            draw.eps.shape(),
            draw.points.len(),
            x.shape()
        ));
    }
    let rank = x.rank();
    let z = forward_diffuse_batch(x, &draw.points, &draw.eps)?;
    let v_hat = predict_v(&z, &draw.times())?;
    if v_hat.shape() != x.shape() {
        return Err(shape_err!(
            "model output {:?} for input {:?}",
            v_hat.shape(),
            x.shape()
        ));
    }
    let (target, base, gain) = match space {
        // ε̂ = σ·z + α·v̂
        LossSpace::Epsilon => (
            draw.eps.clone(),
            scale_rows(&z, &draw.points, |p| p.sigma)?,
            coeff(&draw.points, rank, |p| p.alpha)?,
        ),
        // x̂ = α·z − σ·v̂
        LossSpace::Data => (
            x.clone(),
            scale_rows(&z, &draw.points, |p| p.alpha)?,
            coeff(&draw.points, rank, |p| -p.sigma)?,
        ),
    };
    let prediction = tape.constant(base).add(tape.constant(gain).mul(v_hat)?)?;
    let residual = tape.constant(target).sub(prediction)?;
    residual.square()?.mean_all()
}

fn scale_rows<T: Scalar>(
    z: &Tensor<T>,
    points: &[SchedulePoint],
    f: impl Fn(&SchedulePoint) -> f64,
) -> Result<Tensor<T>> {
    let per = z.numel() / points.len();
    let data = z
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| T::from_f64_lossy(f(&points[i / per]) * v.as_f64()))
        .collect();
    Tensor::new(z.shape(), data)
}

/// Scalar loss value for a fresh draw; fails on a non-finite result.
pub fn diffusion_loss<T, F>(
    x: &Tensor<T>,
    schedule: &ScheduleConfig,
    space: LossSpace,
    time_rng: &mut StreamRng,
    noise_rng: &mut StreamRng,
    predict_v: F,
) -> Result<f64>
where
    T: Scalar,
    F: for<'t> FnOnce(&'t Tape<T>, &Tensor<T>, &[f64]) -> Result<Var<'t, T>>,
{
    let draw = NoiseDraw::sample(schedule, x.shape(), time_rng, noise_rng)?;
    let tape = Tape::new();
    let loss = diffusion_loss_on(&tape, x, &draw, space, |z, t| predict_v(&tape, z, t))?;
    let value = loss.value().item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("diffusion loss is {value}")));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::process::v_target_batch;
    use crate::rng::{stream, Purpose};

    #[test]
    fn oracle_model_has_zero_loss() {
        let schedule = ScheduleConfig::default();
        let x = Tensor::<f64>::from_f64(&[3, 2], &[0.1, -0.5, 0.9, 0.3, -0.2, 0.7]).unwrap();
        let draw = NoiseDraw::sample(
            &schedule,
            x.shape(),
            &mut stream(1, Purpose::Timestep, 0),
            &mut stream(1, Purpose::Noise, 0),
        )
        .unwrap();
        let v = v_target_batch(&x, &draw.eps, &draw.points).unwrap();
        let tape = Tape::new();
        let loss = diffusion_loss_on(&tape, &x, &draw, LossSpace::Epsilon, |_, _| {
            Ok(tape.constant(v.clone()))
        })
        .unwrap();
        assert!(loss.value().item().unwrap().abs() < 1e-20);
    }

    #[test]
    fn zero_prediction_matches_expansion() {
        // one pixel: ε − σ·z = ε − σ(αx + σε) = α(αε − σx) = α·v
        let sp = SchedulePoint::from_alpha(0.37, 0.6);
        let (x, e) = (0.8f64, -1.1f64);
        let expected = {
            let r = e - sp.sigma * (sp.alpha * x + sp.sigma * e);
            r * r
        };
        let closed = (sp.alpha * (sp.alpha * e - sp.sigma * x)).powi(2);
        assert!((expected - closed).abs() < 1e-15);

        let draw = NoiseDraw {
            points: vec![sp],
            eps: Tensor::new(&[1, 1], vec![e]).unwrap(),
        };
        let xt = Tensor::new(&[1, 1], vec![x]).unwrap();
        let tape = Tape::new();
        let loss = diffusion_loss_on(&tape, &xt, &draw, LossSpace::Epsilon, |_, _| {
            Ok(tape.constant(Tensor::zeros(&[1, 1]).unwrap()))
        })
        .unwrap();
        assert!((loss.value().item().unwrap() - closed).abs() < 1e-14);
    }

    #[test]
    fn nan_prediction_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 2]).unwrap();
        let r = diffusion_loss(
            &x,
            &ScheduleConfig::default(),
            LossSpace::Epsilon,
            &mut stream(0, Purpose::Timestep, 0),
            &mut stream(0, Purpose::Noise, 0),
            |tape, _, _| Ok(tape.constant(Tensor::full(&[1, 2], f32::NAN).unwrap())),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}

//! Forward process and v-parameterization conversions.
//!
//! With `α² + σ² = 1`:
//! `z = α·x + σ·ε`, `v = α·ε − σ·x`, `x̂ = α·z − σ·v̂`, `ε̂ = σ·z + α·v̂`.

use super::SchedulePoint;
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Applies `f(point, a, b)` elementwise where the point varies along the
/// leading (batch) axis.
fn per_example<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    points: &[SchedulePoint],
    f: impl Fn(&SchedulePoint, f64, f64) -> f64,
) -> Result<Tensor<T>> {
    if points.is_empty() || (points.len() != 1 && a.shape()[0] != points.len()) {
        return Err(shape_err!(
            "{} schedule points for batch shape {:?}",
            points.len(),
            a.shape()
        ));
    }
    let per = a.numel() / points.len();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (&x, &y))| T::from_f64_lossy(f(&points[i / per], x.as_f64(), y.as_f64())))
        .collect();
    Tensor::new(a.shape(), data)
}

pub fn forward_diffuse<T: Scalar>(
    x: &Tensor<T>,
    sp: &SchedulePoint,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    forward_diffuse_batch(x, std::slice::from_ref(sp), eps)
}

pub fn forward_diffuse_batch<T: Scalar>(
    x: &Tensor<T>,
    points: &[SchedulePoint],
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_same(x, eps, "forward_diffuse")?;
    per_example(x, eps, points, |p, x, e| p.alpha * x + p.sigma * e)
}

pub fn v_target<T: Scalar>(
    x: &Tensor<T>,
    eps: &Tensor<T>,
    sp: &SchedulePoint,
) -> Result<Tensor<T>> {
    v_target_batch(x, eps, std::slice::from_ref(sp))
}

pub fn v_target_batch<T: Scalar>(
    x: &Tensor<T>,
    eps: &Tensor<T>,
    points: &[SchedulePoint],
) -> Result<Tensor<T>> {
    check_same(x, eps, "v_target")?;
    per_example(x, eps, points, |p, x, e| p.alpha * e - p.sigma * x)
}

/// `(x̂, ε̂)` from a v prediction.
pub fn predictions_from_v<T: Scalar>(
    z: &Tensor<T>,
    v_hat: &Tensor<T>,
    sp: &SchedulePoint,
) -> Result<(Tensor<T>, Tensor<T>)> {
    predictions_from_v_batch(z, v_hat, std::slice::from_ref(sp))
}

pub fn predictions_from_v_batch<T: Scalar>(
    z: &Tensor<T>,
    v_hat: &Tensor<T>,
    points: &[SchedulePoint],
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_same(z, v_hat, "predictions_from_v")?;
    let x_hat = per_example(z, v_hat, points, |p, z, v| p.alpha * z - p.sigma * v)?;
    let eps_hat = per_example(z, v_hat, points, |p, z, v| p.sigma * z + p.alpha * v)?;
    Ok((x_hat, eps_hat))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::new(&[data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn zero_noise_scales_signal() {
        let sp = SchedulePoint::from_alpha(0.3, 0.8);
        let x = t(&[1.0, -2.0]);
        let z = forward_diffuse(&x, &sp, &t(&[0.0, 0.0])).unwrap();
        assert_eq!(z.data(), &[0.8, -1.6]);
    }

    #[test]
    fn endpoints_of_v() {
        let x = t(&[0.5, -1.5]);
        let e = t(&[2.0, 0.25]);
        let v0 = v_target(&x, &e, &SchedulePoint::from_alpha(0.0, 1.0)).unwrap();
        assert_eq!(v0.data(), e.data());
        let v1 = v_target(&x, &e, &SchedulePoint::from_alpha(1.0, 0.0)).unwrap();
        assert_eq!(v1.data(), &[-0.5, 1.5]);
        // near t = 1 the latent is the noise itself
        let z = forward_diffuse(&x, &SchedulePoint::from_alpha(1.0, 0.0), &e).unwrap();
        assert_eq!(z.data(), e.data());
    }

    #[test]
    fn v_round_trip() {
        let sp = SchedulePoint::from_alpha(0.4, 0.6);
        let x = t(&[0.1, -0.7, 0.9]);
        let e = t(&[1.3, 0.2, -0.4]);
        let z = forward_diffuse(&x, &sp, &e).unwrap();
        let v = v_target(&x, &e, &sp).unwrap();
        let (xh, eh) = predictions_from_v(&z, &v, &sp).unwrap();
        assert!(xh.max_abs_diff(&x) < 1e-15);
        assert!(eh.max_abs_diff(&e) < 1e-15);
    }

    #[test]
    fn shape_mismatch_errors() {
        let sp = SchedulePoint::from_alpha(0.4, 0.6);
        assert!(forward_diffuse(&t(&[1.0]), &sp, &t(&[1.0, 2.0])).is_err());
    }
}

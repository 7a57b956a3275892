use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-12,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps >= 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update on flat slices; `step` counts from 1.
///
/// All arithmetic is done in `f64` and rounded once on store.
pub fn adam_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if theta.len() != grad.len() || m.len() != grad.len() || v.len() != grad.len() {
        return Err(Error::Shape("adam: slice lengths differ".into()));
    }
    if step == 0 {
        return Err(Error::InvalidArgument("adam step counts from 1".into()));
    }
    if let Some(g) = grad.iter().find(|g| !g.as_f64().is_finite()) {
        return Err(Error::NonFinite(format!("gradient value {}", g.as_f64())));
    }
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..theta.len() {
        let g = grad[i].as_f64();
        let mi = cfg.beta1 * m[i].as_f64() + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i].as_f64() + (1.0 - cfg.beta2) * g * g;
        let delta = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        m[i] = T::from_f64_lossy(mi);
        v[i] = T::from_f64_lossy(vi);
        theta[i] = T::from_f64_lossy(theta[i].as_f64() - delta);
    }
    Ok(())
}

/// First and second moments plus the number of updates taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Result<Self> {
        Ok(Self {
            m: params.zeros_like()?,
            v: params.zeros_like()?,
            step: 0,
        })
    }
}

/// Applies one Adam update to every parameter. Gradients must have the
/// same layout as `params`. Non-finite gradients abort before anything is
/// modified.
pub fn adam_step(
    params: &mut Params,
    grads: &Params,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    params.check_same_layout(grads)?;
    params.check_same_layout(&state.m)?;
    for (name, g) in grads.iter() {
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    for (name, g) in grads.iter() {
        let theta = params.get_mut(name)?.data_mut();
        let m = state.m.get_mut(name)?.data_mut();
        let v = state.v.get_mut(name)?.data_mut();
        adam_update(theta, g.data(), m, v, state.step, cfg)?;
    }
    Ok(())
}

/// `ema ← decay·ema + (1 − decay)·params` on flat slices, computed in `f64`.
pub fn ema_update_slice<T: Scalar>(ema: &mut [T], params: &[T], decay: f64) -> Result<()> {
    if ema.len() != params.len() {
        return Err(Error::Shape("ema: slice lengths differ".into()));
    }
    for (e, &x) in ema.iter_mut().zip(params) {
        *e = T::from_f64_lossy(decay * e.as_f64() + (1.0 - decay) * x.as_f64());
    }
    Ok(())
}

/// [`ema_update_slice`] over every parameter.
pub fn ema_update(ema: &mut Params, params: &Params, decay: f64) -> Result<()> {
    ema.check_same_layout(params)?;
    for (name, p) in params.iter() {
        ema_update_slice(ema.get_mut(name)?.data_mut(), p.data(), decay)?;
    }
    Ok(())
}

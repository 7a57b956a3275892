//! Ancestral DDPM sampling with interpolated step variance and
//! classifier-free guidance in v-space.

use super::{ScheduleConfig, SchedulePoint};
use crate::error::{shape_err, Error, Result};
use crate::rng::{normal_vec_f32, StreamRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    /// Exponent on the posterior stddev; `1 − eta` goes to the transition
    /// stddev.
    pub eta: f64,
    pub guidance: f64,
    pub final_step_noise: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 50,
            eta: 0.2,
            guidance: 0.5,
            final_step_noise: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        if !(self.guidance >= 0.0) {
            return Err(Error::Config(format!(
                "guidance {} must be >= 0",
                self.guidance
            )));
        }
        Ok(())
    }
}

/// Coefficients of one `t → s` step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    /// Weight of `z_t` in the posterior mean.
    pub mean_z: f64,
    /// Weight of `x̂` in the posterior mean.
    pub mean_x: f64,
    /// `σ_{t|s}·σ_s/σ_t`, the true posterior stddev.
    pub posterior_std: f64,
    /// `σ_{t|s}`, the forward transition stddev.
    pub transition_std: f64,
    pub stddev: f64,
}

/// `low^eta · high^(1 − eta)`, exact at both endpoints.
pub fn interpolated_stddev(low: f64, high: f64, eta: f64) -> f64 {
    if eta == 1.0 {
        low
    } else if eta == 0.0 {
        high
    } else {
        low.powf(eta) * high.powf(1.0 - eta)
    }
}

pub fn step_coefficients(
    sp_t: &SchedulePoint,
    sp_s: &SchedulePoint,
    eta: f64,
) -> Result<StepCoefficients> {
    if !(sp_s.t < sp_t.t) {
        return Err(Error::InvalidArgument(format!(
            "sampler step must go backwards in time: {} -> {}",
            sp_t.t, sp_s.t
        )));
    }
    let alpha_ts = sp_t.alpha / sp_s.alpha;
    let var_t = sp_t.sigma * sp_t.sigma;
    let var_s = sp_s.sigma * sp_s.sigma;
    let var_ts = (var_t - alpha_ts * alpha_ts * var_s).max(0.0);
    let sigma_ts = var_ts.sqrt();
    let posterior_std = sigma_ts * sp_s.sigma / sp_t.sigma;
    Ok(StepCoefficients {
        mean_z: alpha_ts * var_s / var_t,
        mean_x: sp_s.alpha * var_ts / var_t,
        posterior_std,
        transition_std: sigma_ts,
        stddev: interpolated_stddev(posterior_std, sigma_ts, eta),
    })
}

/// One ancestral step from `z_t` given the model's `v̂`.
pub fn ddpm_step(
    z_t: &Tensor<f32>,
    v_hat: &Tensor<f32>,
    sp_t: &SchedulePoint,
    sp_s: &SchedulePoint,
    cfg: &SamplerConfig,
    add_noise: bool,
    rng: &mut StreamRng,
) -> Result<Tensor<f32>> {
    if z_t.shape() != v_hat.shape() {
        return Err(shape_err!(
            "ddpm_step: {:?} vs {:?}",
            z_t.shape(),
            v_hat.shape()
        ));
    }
    let c = step_coefficients(sp_t, sp_s, cfg.eta)?;
    let noise = if add_noise && c.stddev > 0.0 {
        Some(normal_vec_f32(rng, z_t.numel()))
    } else {
        None
    };
    let data = z_t
        .data()
        .iter()
        .zip(v_hat.data())
        .enumerate()
        .map(|(i, (&z, &v))| {
            let (z, v) = (z as f64, v as f64);
            let x_hat = sp_t.alpha * z - sp_t.sigma * v;
            let mean = c.mean_z * z + c.mean_x * x_hat;
            let n = noise.as_ref().map_or(0.0, |n| n[i] as f64);
            (mean + c.stddev * n) as f32
        })
        .collect();
    Tensor::new(z_t.shape(), data)
}

/// `v_c + g·(v_c − v_u)`.
pub fn guided_v(v_cond: &Tensor<f32>, v_uncond: &Tensor<f32>, g: f64) -> Result<Tensor<f32>> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(shape_err!(
            "guided_v: {:?} vs {:?}",
            v_cond.shape(),
            v_uncond.shape()
        ));
    }
    if g == 0.0 {
        return Ok(v_cond.clone());
    }
    let g = g as f32;
    let data = v_cond
        .data()
        .iter()
        .zip(v_uncond.data())
        .map(|(&c, &u)| c + g * (c - u))
        .collect();
    Tensor::new(v_cond.shape(), data)
}

/// Anything that predicts `v̂` for a batch of latents at a shared time.
pub trait VelocityModel {
    /// `conditional == false` asks for the null-context prediction.
    fn predict(&mut self, z: &Tensor<f32>, t: f64, conditional: bool) -> Result<Tensor<f32>>;

    /// Conditional and unconditional predictions; implementations may batch
    /// both branches into one evaluation.
    fn predict_both(&mut self, z: &Tensor<f32>, t: f64) -> Result<(Tensor<f32>, Tensor<f32>)> {
        Ok((self.predict(z, t, true)?, self.predict(z, t, false)?))
    }
}

impl<F> VelocityModel for F
where
    F: FnMut(&Tensor<f32>, f64, bool) -> Result<Tensor<f32>>,
{
    fn predict(&mut self, z: &Tensor<f32>, t: f64, conditional: bool) -> Result<Tensor<f32>> {
        self(z, t, conditional)
    }
}

/// Runs the sampler from Gaussian noise at `t_max` down to `t_min`.
pub fn sample(
    model: &mut dyn VelocityModel,
    cfg: &SamplerConfig,
    schedule: &ScheduleConfig,
    shape: &[usize],
    rng: &mut StreamRng,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    schedule.validate()?;
    let n: usize = shape.iter().product();
    let mut z = Tensor::new(shape, normal_vec_f32(rng, n))?;
    let grid = schedule.grid(cfg.num_steps);
    for (i, pair) in grid.windows(2).enumerate() {
        let sp_t = schedule.at(pair[0])?;
        let sp_s = schedule.at(pair[1])?;
        let v_hat = if cfg.guidance > 0.0 {
            let (vc, vu) = model.predict_both(&z, sp_t.t)?;
            guided_v(&vc, &vu, cfg.guidance)?
        } else {
            model.predict(&z, sp_t.t, true)?
        };
        if v_hat.shape() != shape {
            return Err(shape_err!(
                "model returned {:?} for {:?}",
                v_hat.shape(),
                shape
            ));
        }
        let last = i + 2 == grid.len();
        z = ddpm_step(
            &z,
            &v_hat,
            &sp_t,
            &sp_s,
            cfg,
            !last || cfg.final_step_noise,
            rng,
        )?;
    }
    z.validate("sample")?;
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        assert_eq!(interpolated_stddev(0.1, 0.3, 1.0), 0.1);
        assert_eq!(interpolated_stddev(0.1, 0.3, 0.0), 0.3);
        let s = interpolated_stddev(0.1, 0.3, 0.2);
        assert!((s - 0.1f64.powf(0.2) * 0.3f64.powf(0.8)).abs() < 1e-15);
        assert!((s - 0.2408).abs() < 1e-4);
    }

    #[test]
    fn coefficient_endpoints() {
        let sched = ScheduleConfig::default();
        let (t, s) = (sched.at(0.6).unwrap(), sched.at(0.4).unwrap());
        let post = step_coefficients(&t, &s, 1.0).unwrap();
        assert_eq!(post.stddev, post.posterior_std);
        let trans = step_coefficients(&t, &s, 0.0).unwrap();
        assert_eq!(trans.stddev, trans.transition_std);
        assert!(post.posterior_std < post.transition_std);
    }

    #[test]
    fn forward_in_time_is_rejected() {
        let sched = ScheduleConfig::default();
        let (t, s) = (sched.at(0.4).unwrap(), sched.at(0.6).unwrap());
        assert!(step_coefficients(&t, &s, 0.2).is_err());
    }

    #[test]
    fn guidance_formula() {
        let c = Tensor::new(&[1], vec![1.0f32]).unwrap();
        let u = Tensor::new(&[1], vec![0.0f32]).unwrap();
        assert_eq!(guided_v(&c, &u, 0.0).unwrap(), c);
        assert_eq!(guided_v(&c, &c, 3.0).unwrap(), c);
        assert_eq!(guided_v(&c, &u, 0.5).unwrap().data(), &[1.5]);
    }

    #[test]
    fn one_step_oracle_recovers_data() {
        let sched = ScheduleConfig::default();
        let x = Tensor::new(&[2, 3], vec![0.5f32, -0.25, 1.0, -1.0, 0.0, 0.75]).unwrap();
        let cfg = SamplerConfig {
            num_steps: 1,
            guidance: 0.0,
            ..SamplerConfig::default()
        };
        // v such that x̂ = α z − σ v equals x for whatever z is.
        let target = x.clone();
        let mut oracle = move |z: &Tensor<f32>, t: f64, _c: bool| -> Result<Tensor<f32>> {
            let p = ScheduleConfig::default().at(t)?;
            let data = z
                .data()
                .iter()
                .zip(target.data())
                .map(|(&z, &x)| ((p.alpha * z as f64 - x as f64) / p.sigma) as f32)
                .collect();
            Tensor::new(z.shape(), data)
        };
        let out = sample(
            &mut oracle,
            &cfg,
            &sched,
            &[2, 3],
            &mut stream(3, Purpose::Sampling, 0),
        )
        .unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert!(out.max_abs_diff(&x) < 1e-5, "{:?}", out);
    }

    #[test]
    fn sampling_is_deterministic() {
        let sched = ScheduleConfig::default();
        let cfg = SamplerConfig {
            num_steps: 5,
            ..SamplerConfig::default()
        };
        let mut model = |z: &Tensor<f32>, t: f64, c: bool| -> Result<Tensor<f32>> {
            let k = if c { 0.3 } else { 0.1 } as f32;
            Tensor::new(
                z.shape(),
                z.data().iter().map(|&v| v * k * t as f32).collect(),
            )
        };
        let a = sample(
            &mut model,
            &cfg,
            &sched,
            &[4],
            &mut stream(9, Purpose::Sampling, 0),
        )
        .unwrap();
        let b = sample(
            &mut model,
            &cfg,
            &sched,
            &[4],
            &mut stream(9, Purpose::Sampling, 0),
        )
        .unwrap();
        assert_eq!(a.data(), b.data());
    }
}

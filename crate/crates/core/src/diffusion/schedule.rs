use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

/// Resolution-shifted cosine schedule.
///
/// The base cosine schedule `α = cos(πt/2)`, `σ = sin(πt/2)` is shifted in
/// log-SNR by `2·ln(base_resolution / image_resolution)`, then `α`, `σ` are
/// recovered from the shifted log-SNR under `α² + σ² = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub base_resolution: u32,
    pub image_resolution: u32,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_resolution: 32,
            image_resolution: 16,
            t_min: 1e-4,
            t_max: 1.0 - 1e-4,
        }
    }
}

/// Forward-process coefficients at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulePoint {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub log_snr: f64,
}

impl SchedulePoint {
    pub fn snr(&self) -> f64 {
        self.log_snr.exp()
    }

    /// Endpoint with explicit coefficients, for tests and closed-form checks.
    pub fn from_alpha(t: f64, alpha: f64) -> Self {
        let sigma = (1.0 - alpha * alpha).max(0.0).sqrt();
        Self {
            t,
            alpha,
            sigma,
            log_snr: (alpha * alpha / (sigma * sigma)).ln(),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ScheduleConfig {
    pub fn for_resolution(image_resolution: u32) -> Self {
        Self {
            image_resolution,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_resolution == 0 || self.image_resolution == 0 {
            return Err(Error::Config(
                "schedule resolutions must be positive".into(),
            ));
        }
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < t_min < t_max < 1, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    pub fn shift(&self) -> f64 {
        2.0 * (self.base_resolution as f64 / self.image_resolution as f64).ln()
    }

    pub fn log_snr(&self, t: f64) -> f64 {
        -2.0 * (FRAC_PI_2 * t).tan().ln() + self.shift()
    }

    pub fn at(&self, t: f64) -> Result<SchedulePoint> {
        if !(self.t_min..=self.t_max).contains(&t) {
            return Err(Error::InvalidArgument(format!(
                "t = {t} outside [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        let log_snr = self.log_snr(t);
        Ok(SchedulePoint {
            t,
            alpha: sigmoid(log_snr).sqrt(),
            sigma: sigmoid(-log_snr).sqrt(),
            log_snr,
        })
    }

    /// Uniform grid from `t_max` down to `t_min` with `steps` intervals.
    pub fn grid(&self, steps: usize) -> Vec<f64> {
        (0..=steps)
            .rev()
            .map(|i| {
                if i == steps {
                    self.t_max
                } else if i == 0 {
                    self.t_min
                } else {
                    self.t_min + (self.t_max - self.t_min) * i as f64 / steps as f64
                }
            })
            .collect()
    }
}

/// Convenience wrapper over [`ScheduleConfig::at`].
pub fn schedule_at(cfg: &ScheduleConfig, t: f64) -> Result<SchedulePoint> {
    cfg.at(t)
}

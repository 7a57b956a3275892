//! Noise schedule, forward process, training loss and sampler.

pub mod loss;
pub mod process;
pub mod sampler;
mod schedule;

pub use loss::{diffusion_loss, diffusion_loss_on, LossSpace, NoiseDraw};
pub use process::{
    forward_diffuse, forward_diffuse_batch, predictions_from_v, predictions_from_v_batch, v_target,
    v_target_batch,
};
pub use sampler::{
    ddpm_step, guided_v, interpolated_stddev, sample, step_coefficients, SamplerConfig,
    StepCoefficients, VelocityModel,
};
pub use schedule::{schedule_at, ScheduleConfig, SchedulePoint};

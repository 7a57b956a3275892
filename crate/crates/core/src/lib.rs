//! Image-variation diffusion at desk scale: a small autodiff engine, a
//! v-prediction diffusion process, frozen conditioning encoders, a
//! transformer denoiser, a synthetic episodic corpus, training, metrics and
//! experiment drivers.

// `!(a < b)` guards deliberately reject NaN; `Var::add` and friends return
// `Result` so they cannot be the operator traits.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

mod binio;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod experiments;
pub mod generate;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};

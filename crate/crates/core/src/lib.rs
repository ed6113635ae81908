//! Knowledge-enhanced text-conditioned diffusion with a mixture of denoising
//! experts, built on a small reverse-mode differentiation core.
//!
//! Everything numeric is generic over [`Scalar`] (`f64` and `f32`); the
//! aliases below fix the 64-bit precision used for training and checks.

pub mod autodiff;
pub mod conditioning;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod eval_synth;
pub mod mode;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type Schedule64 = schedule::NoiseSchedule<f64>;
pub type Bank64 = mode::ExpertBank<f64>;

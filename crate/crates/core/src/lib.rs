//! Residual denoising-diffusion super-resolution with a dual-decoder
//! conditional noise predictor.
//!
//! All numerics are generic over [`Scalar`] (`f32` and `f64`); the aliases at
//! the bottom of this file name the common instantiations.

pub mod autograd;
pub mod cnp;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod lr_encoder;
pub mod metrics;
mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod tensor;

pub use cnp::{Cnp, CnpConfig, DecoderMode};
pub use diffusion::{DiffusionBatch, NoisePredictor};
pub use error::{Error, Result};
pub use image::{ImageTensor, ValueRange};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use schedule::NoiseSchedule;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Image32 = ImageTensor<f32>;
pub type Image64 = ImageTensor<f64>;
pub type Params32 = ParamStore<f32>;
pub type Params64 = ParamStore<f64>;

//! Geometric latent diffusion for small 3D molecules.
//!
//! Generic numeric code is parameterised by [`Scalar`] (f32 or f64); the
//! aliases below fix the working precision to f64.

pub mod autodiff;
pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod egnn;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod scalar;
pub mod selfcheck;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Egnn = egnn::EgnnParams<f64>;
pub type Egnn32 = egnn::EgnnParams<f32>;
pub type Autoencoder = autoencoder::Autoencoder<f64>;
pub type Geometry = autoencoder::Geometry<f64>;
pub type Denoiser = diffusion::Denoiser<f64>;
pub type LatentPoint = autoencoder::LatentPoint<f64>;
pub use diffusion::NoiseSchedule;

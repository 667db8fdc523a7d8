//! Multi-modal temporo-spatial vision transformer (TSViT) for per-pixel
//! classification of co-registered satellite image time series.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix the precision the command-line tool uses.

pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

pub type TensorF64 = tensor::Tensor<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type ParamStoreF64 = params::ParamStore<f64>;
pub type ParamStoreF32 = params::ParamStore<f32>;
pub type SitsSampleF64 = data::SitsSample<f64>;
pub type SitsSampleF32 = data::SitsSample<f32>;
pub type CoRegisteredSetF64 = data::CoRegisteredSet<f64>;
pub type CoRegisteredSetF32 = data::CoRegisteredSet<f32>;
pub type ModelF64 = model::Model<f64>;
pub type ModelF32 = model::Model<f32>;

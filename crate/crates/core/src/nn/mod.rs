//! Minimal reverse-mode building blocks for the radiance field MLPs and the
//! fusion GAN.

pub mod adam;
pub mod conv;
pub mod dense;
pub mod seq;
pub mod store;

pub use adam::{Adam, AdamConfig, ExponentialDecay};
pub use store::{ParamStore, Tensor, TensorId};

//! Novel view synthesis for scenes with a face.
//!
//! A time-conditioned radiance field renders the scene; a textured face mesh
//! is rasterized at the same camera; a conditional GAN fuses both renders.

pub mod checkpoint;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod face_texture;
pub mod field;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod imaging;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod render;
pub mod scalar;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Camera32 = geometry::Camera<f32>;
pub type Camera64 = geometry::Camera<f64>;

pub type Field32 = field::RadianceField<f32>;
pub type Field64 = field::RadianceField<f64>;

//! Simulation and design toolkit for dense-focal-stack multifocal displays.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`). The aliases below
//! fix the precision used by the command line tools; the control loop and
//! file formats work in `f64` throughout.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod control;
pub mod filtering;
pub mod image;
pub mod io;
pub mod lightfield;
pub mod metrics;
pub mod optics;
pub mod optimize;
pub mod render;
pub mod scalar;
pub mod spectral;

pub use scalar::Real;

pub type Display = optics::DisplayModel<f64>;
pub type Eye = optics::EyeModel<f64>;
pub type Layout = optics::PlaneLayout<f64>;
pub type Raster = image::Image<f64>;
pub type SceneF64 = filtering::Scene<f64>;
pub type Stack = filtering::FocalStack<f64>;

pub type DisplayF32 = optics::DisplayModel<f32>;
pub type EyeF32 = optics::EyeModel<f32>;
pub type StackF32 = filtering::FocalStack<f32>;

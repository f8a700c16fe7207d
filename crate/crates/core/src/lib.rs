//! Camera-conditioning machinery for image-to-video diffusion.
//!
//! The crate covers Plücker ray embeddings, multi-resolution epipolar
//! attention masks with register tokens, masked attention kernels, multiple
//! classifier-free guidance, trajectory metrics (RotErr, TransErr, CamMC) with
//! their SfM ingestion, and a desk-scale diffusion harness used to compare
//! attention variants.
//!
//! Geometry, attention, guidance and metric code is generic over [`Real`]
//! (`f32` or `f64`); the aliases below pin the common `f64` instantiations.

// `!(x < y)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod epipolar;
pub mod error;
pub mod geometry;
pub mod guidance;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod scalar;
pub mod toydiff;

pub use error::{Error, Result};
pub use scalar::Real;

pub type CameraIntrinsicsF64 = geometry::CameraIntrinsics<f64>;
pub type CameraPoseF64 = geometry::CameraPose<f64>;
pub type CameraFrameF64 = geometry::CameraFrame<f64>;
pub type PluckerRayF64 = geometry::PluckerRay<f64>;
pub type PluckerGridF64 = geometry::PluckerGrid<f64>;
pub type CameraFrameF32 = geometry::CameraFrame<f32>;

//! Deformable 3D Gaussian splatting.
//!
//! A canonical cloud of anisotropic Gaussians is moved to any timestamp by a
//! deformation field conditioned on geometry features (a sparse voxel U-Net
//! fused with a per-point MLP), then rendered by a differentiable tile
//! rasterizer. The [`train`] module fits both to posed, timestamped images.

pub mod data;
pub mod deform;
pub mod error;
pub mod gaussian;
pub mod geometry;
pub mod nn;
pub mod raster;
pub mod train;

pub use error::{Error, Result};

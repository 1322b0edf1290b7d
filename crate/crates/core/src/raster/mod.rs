//! Differentiable software rasterizer for 3D Gaussians.

mod camera;
mod image;
mod project;
mod rasterize;
mod render;

pub use camera::Camera;
pub use image::Image;
pub use project::{project, project_backward, project_covariance, ProjectOutcome, Projection, DILATION, FRUSTUM_SLACK};
pub use rasterize::{
    depth_order, rasterize, rasterize_backward, RasterSplat, RasterState, SplatGrad, CUTOFF_Q, MAX_ALPHA, MIN_ALPHA,
    MIN_TRANSMITTANCE, TILE_SIZE,
};
pub use render::{render, render_backward, RenderGrad, RenderOutput, RenderSettings, RenderState};

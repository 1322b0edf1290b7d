use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::camera::Camera;
use super::image::Image;
use super::project::{project, project_backward, ProjectOutcome};
use super::rasterize::{rasterize, rasterize_backward, RasterSplat, RasterState, TILE_SIZE};
use crate::deform::{DeformedGaussians, DeformedGrad};
use crate::error::{Error, Result};
use crate::gaussian::{covariance_backward, covariance_from_rotation, eval_sh_backward, eval_sh_color, num_sh_coeffs};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    pub tile_size: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [1.0; 3],
            tile_size: TILE_SIZE,
        }
    }
}

/// Forward products kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct RenderState {
    pub splats: Vec<RasterSplat>,
    /// Gaussian index of each splat.
    pub source: Vec<usize>,
    pub raster: RasterState,
    /// Gaussians skipped for a non-invertible 2D covariance.
    pub singular: usize,
    num_gaussians: usize,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image,
    pub state: RenderState,
}

/// Gradients on the deformed Gaussians plus density-control statistics.
#[derive(Clone, Debug)]
pub struct RenderGrad {
    pub deformed: DeformedGrad,
    /// With respect to activated opacity.
    pub opacity: Vec<f64>,
    pub sh: Tensor,
    /// `‖∂L/∂mean2d‖` in normalized device units.
    pub mean2d_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

pub fn render(g: &DeformedGaussians, cam: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    let center = cam.center();
    let projected: Vec<(usize, ProjectOutcome)> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let cov = covariance_from_rotation(&g.rotations[i], &g.scales[i]);
            (i, project(&g.positions[i], &cov, cam))
        })
        .collect();
    let mut splats = Vec::new();
    let mut source = Vec::new();
    let mut singular = 0;
    for (i, outcome) in projected {
        match outcome {
            ProjectOutcome::Visible(p) => {
                let color = eval_sh_color(g.sh(i), g.sh_degree, &(g.positions[i] - center).normalize());
                splats.push(RasterSplat {
                    mean: [p.mean2d.x, p.mean2d.y],
                    conic: p.conic,
                    color,
                    opacity: g.opacities[i],
                    depth: p.depth,
                    radius: p.radius,
                });
                source.push(i);
            }
            ProjectOutcome::Culled => {}
            ProjectOutcome::Singular => singular += 1,
        }
    }
    let (image, raster) = rasterize(&splats, cam.width, cam.height, settings.tile_size, settings.background);
    Ok(RenderOutput {
        image,
        state: RenderState {
            splats,
            source,
            raster,
            singular,
            num_gaussians: g.len(),
        },
    })
}

pub fn render_backward(g: &DeformedGaussians, cam: &Camera, state: &RenderState, grad_image: &Image) -> Result<RenderGrad> {
    if state.num_gaussians != g.len() {
        return Err(Error::Contract(format!(
            "backward got {} gaussians, forward had {}",
            g.len(),
            state.num_gaussians
        )));
    }
    let splat_grads = rasterize_backward(&state.splats, &state.raster, grad_image)?;
    let n = g.len();
    let k = num_sh_coeffs(g.sh_degree);
    let center = cam.center();
    let chained: Vec<(usize, Vector3<f64>, Matrix3<f64>, Vector3<f64>, Vec<f64>, f64, f64)> = state
        .source
        .par_iter()
        .zip(&splat_grads)
        .map(|(&i, sg)| {
            let cov = covariance_from_rotation(&g.rotations[i], &g.scales[i]);
            let d_mean = Vector2::new(sg.mean[0], sg.mean[1]);
            let (mut d_pos, d_cov) = project_backward(&g.positions[i], &cov, cam, &d_mean, &sg.conic);
            let (d_rot, d_scale) = covariance_backward(&g.rotations[i], &g.scales[i], &d_cov);
            let mut d_sh = vec![0.0; 3 * k];
            d_pos += eval_sh_backward(g.sh(i), g.sh_degree, &(g.positions[i] - center), &sg.color, &mut d_sh);
            let ndc = (sg.mean[0] * 0.5 * cam.width as f64).hypot(sg.mean[1] * 0.5 * cam.height as f64);
            (i, d_pos, d_rot, d_scale, d_sh, sg.opacity, ndc)
        })
        .collect();
    let mut out = RenderGrad {
        deformed: DeformedGrad::zeros(n),
        opacity: vec![0.0; n],
        sh: Tensor::zeros(&[n, 3, k]),
        mean2d_norm: vec![0.0; n],
        visible: vec![false; n],
    };
    for (i, d_pos, d_rot, d_scale, d_sh, d_op, ndc) in chained {
        out.deformed.positions[i] = d_pos;
        out.deformed.rotations[i] = d_rot;
        out.deformed.scales[i] = d_scale;
        out.sh.row_mut(i).copy_from_slice(&d_sh);
        out.opacity[i] = d_op;
        out.mean2d_norm[i] = ndc;
        out.visible[i] = true;
    }
    Ok(out)
}

//! Forward and reverse pass through cloud, network, rasterizer, and loss.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::deform::{
    apply_deformation, apply_deformation_backward, deform_positions, undeformed, DeformationNetwork, DeformationOutput,
    DeformedGaussians, VoxelInputs, DX,
};
use crate::error::{Error, Result};
use crate::gaussian::{sigmoid, GaussianCloud, CLOUD_PARAMS};
use crate::geometry::VoxelCache;
use crate::nn::{ParamId, Tape, Tensor};
use crate::raster::{render, render_backward, Camera, Image, RenderSettings};

use super::loss::{image_loss_with_grad, motion_loss, motion_loss_grad, LossReport};

/// Whether the deformation network takes part.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Canonical cloud rendered directly.
    Static,
    Dynamic,
}

/// Canonical Gaussians, deformation network, and the voxelization it reads.
#[derive(Clone, Debug)]
pub struct Model {
    pub cloud: GaussianCloud,
    pub net: DeformationNetwork,
    pub voxels: VoxelCache,
}

#[derive(Clone, Debug)]
pub struct ModelGrads {
    /// In [`CLOUD_PARAMS`] order.
    pub cloud: [Tensor; 5],
    pub net: BTreeMap<ParamId, Tensor>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub report: LossReport,
    pub image: Image,
    pub grads: ModelGrads,
    pub mean2d_norm: Vec<f64>,
    pub visible: Vec<bool>,
    pub scales_t: Vec<Vector3<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub omega: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: super::loss::DEFAULT_LAMBDA,
            omega: super::loss::DEFAULT_OMEGA,
        }
    }
}

impl Model {
    pub fn canonical_points(&self) -> Vec<Vector3<f64>> {
        (0..self.cloud.len()).map(|i| self.cloud.position(i)).collect()
    }

    /// Rebuild the voxelization if the canonical points drifted.
    pub fn refresh_voxels(&mut self) -> Result<bool> {
        if !self.net.spec.geometry_branch {
            return Ok(false);
        }
        let pts = self.canonical_points();
        self.voxels.refresh(&pts)
    }

    fn voxel_inputs(&self) -> Result<Option<VoxelInputs<'_>>> {
        if !self.net.spec.geometry_branch {
            return Ok(None);
        }
        let (grid, plan, point_index) = self.voxels.parts()?;
        Ok(Some(VoxelInputs {
            grid,
            plan,
            point_index,
        }))
    }

    /// Network output at `t` for the whole cloud.
    pub fn deformation(&self, t: f64) -> Result<DeformationOutput> {
        deform_positions(&self.net, &self.cloud.positions, self.voxel_inputs()?, t)
    }

    pub fn deformed(&self, t: f64, phase: Phase) -> Result<DeformedGaussians> {
        match phase {
            Phase::Static => undeformed(&self.cloud),
            Phase::Dynamic => apply_deformation(&self.cloud, &self.deformation(t)?),
        }
    }

    pub fn render(&self, cam: &Camera, t: f64, phase: Phase, settings: &RenderSettings) -> Result<Image> {
        crate::deform::check_time(t)?;
        Ok(render(&self.deformed(t, phase)?, cam, settings)?.image)
    }

    /// Loss only, for finite differences.
    pub fn loss(
        &self,
        cam: &Camera,
        target: &Image,
        t: f64,
        phase: Phase,
        settings: &RenderSettings,
        w: LossWeights,
    ) -> Result<LossReport> {
        crate::deform::check_time(t)?;
        let (g, motion) = match phase {
            Phase::Static => (undeformed(&self.cloud)?, 0.0),
            Phase::Dynamic => {
                let d = self.deformation(t)?;
                (apply_deformation(&self.cloud, &d)?, motion_loss(&d.dx))
            }
        };
        let img = render(&g, cam, settings)?.image;
        let (l1, d_ssim) = super::loss::photometric_loss(&img, target)?;
        Ok(LossReport::assemble(l1, d_ssim, motion, w.lambda, w.omega))
    }

    /// Loss and gradients for every learnable tensor. The voxel cache is
    /// used as is.
    pub fn loss_and_grad(
        &self,
        cam: &Camera,
        target: &Image,
        t: f64,
        phase: Phase,
        settings: &RenderSettings,
        w: LossWeights,
    ) -> Result<StepOutput> {
        crate::deform::check_time(t)?;
        let n = self.cloud.len();
        let mut tape = Tape::new();
        let (d, net_out) = match phase {
            Phase::Static => (DeformationOutput::zeros(n), None),
            Phase::Dynamic => {
                let x = tape.input(self.cloud.positions.clone());
                let y = self.net.forward(&mut tape, x, self.voxel_inputs()?, t)?;
                (DeformationOutput::from_raw(tape.value(y))?, Some((x, y)))
            }
        };
        let g = apply_deformation(&self.cloud, &d)?;
        let out = render(&g, cam, settings)?;
        let (l1, d_ssim, grad_image) = image_loss_with_grad(&out.image, target, w.lambda)?;
        let motion = if net_out.is_some() { motion_loss(&d.dx) } else { 0.0 };
        let report = LossReport::assemble(l1, d_ssim, motion, w.lambda, w.omega);

        let rg = render_backward(&g, cam, &out.state, &grad_image)?;
        let ag = apply_deformation_backward(&self.cloud, &d, &g, &rg.deformed)?;
        let mut positions = ag.positions;
        let mut net = BTreeMap::new();
        if let Some((x, y)) = net_out {
            let mut seed = ag.output;
            let mg = motion_loss_grad(&d.dx);
            for i in 0..n {
                for (a, c) in DX.enumerate() {
                    seed.row_mut(i)[c] += w.omega * mg.row(i)[a];
                }
            }
            let pt = tape.backward_from(y, seed)?;
            if let Some(gx) = pt.grad(x) {
                positions.data_mut().iter_mut().zip(gx.data()).for_each(|(a, b)| *a += b);
            }
            net = pt.into_params();
        }
        let opacity = Tensor::new(
            vec![n],
            (0..n)
                .map(|i| {
                    let s = sigmoid(self.cloud.opacity_logits.data()[i]);
                    rg.opacity[i] * s * (1.0 - s)
                })
                .collect(),
        )?;
        let grads = ModelGrads {
            cloud: [positions, ag.rot6d, ag.log_scales, opacity, rg.sh],
            net,
        };
        for (name, t) in CLOUD_PARAMS.iter().zip(&grads.cloud) {
            if !t.all_finite() {
                return Err(Error::NonFiniteGradient { path: format!("cloud/{name}") });
            }
        }
        for (id, t) in &grads.net {
            if !t.all_finite() {
                return Err(Error::NonFiniteGradient {
                    path: self.net.store.name(*id).to_string(),
                });
            }
        }
        Ok(StepOutput {
            report,
            image: out.image,
            grads,
            mean2d_norm: rg.mean2d_norm,
            visible: rg.visible,
            scales_t: g.scales,
        })
    }
}

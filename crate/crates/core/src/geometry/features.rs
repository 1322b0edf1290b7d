use std::sync::Arc;

use nalgebra::Vector3;
use rand::Rng;

use super::unet::{SparseUNet, UNetPlan, UNetSpec, UNET_LEVELS};
use super::voxel::{voxelize, SparseVoxelGrid};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpSpec, ParamStore, Tape, Tensor, Var};

/// Widths of the two per-point branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeometrySpec {
    pub unet: UNetSpec,
    pub identity_hidden: usize,
    pub fusion_width: usize,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        Self {
            unet: UNetSpec::default(),
            identity_hidden: 64,
            fusion_width: 64,
        }
    }
}

/// Identity branch, sparse U-Net branch and the fusion MLP.
#[derive(Clone, Debug)]
pub struct GeometryEncoder {
    pub identity: Mlp,
    pub unet: SparseUNet,
    pub fusion: Mlp,
}

/// Per-point features of one forward pass, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct GeometryVars {
    pub f_identity: Var,
    pub f_geometric: Var,
    pub f_fuse: Var,
}

/// Per-point features of one forward pass, as values.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryFeatures {
    pub f_identity: Tensor,
    pub f_geometric: Tensor,
    pub f_fuse: Tensor,
}

impl GeometryEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, spec: GeometrySpec, rng: &mut R) -> Self {
        let c = spec.unet.output;
        let identity = Mlp::new(
            store,
            &format!("{prefix}.identity"),
            &MlpSpec {
                input: 3,
                hidden: vec![spec.identity_hidden],
                output: c,
                skip_at: None,
                output_activation: Activation::Identity,
                zero_last: false,
            },
            rng,
        );
        let unet = SparseUNet::new(store, &format!("{prefix}.unet"), spec.unet, rng);
        let fusion = Mlp::new(
            store,
            &format!("{prefix}.fusion"),
            &MlpSpec {
                input: 2 * c,
                hidden: vec![spec.fusion_width; 2],
                output: spec.fusion_width,
                skip_at: None,
                output_activation: Activation::Identity,
                zero_last: false,
            },
            rng,
        );
        Self { identity, unet, fusion }
    }

    pub fn identity_width(&self) -> usize {
        self.identity.output_width()
    }

    pub fn fused_width(&self) -> usize {
        self.fusion.output_width()
    }

    /// `F_p = MLP(x)`, `F_p' = U-Net(V)[point_to_voxel]`,
    /// `F_fuse = MLP([F_p', F_p])`.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        positions: Var,
        grid: &SparseVoxelGrid,
        plan: &UNetPlan,
        point_index: &Arc<[usize]>,
    ) -> Result<GeometryVars> {
        let n = tape.value(positions).rows();
        if point_index.len() != n {
            return Err(Error::Consistency(format!(
                "voxel map covers {} points but the cloud has {n}",
                point_index.len()
            )));
        }
        let f_identity = self.identity.forward(tape, store, positions)?;
        let voxel_in = tape.constant(grid.voxel_features.clone());
        let voxel_out = self.unet.forward(tape, store, plan, voxel_in)?;
        let f_geometric = tape.gather_rows(voxel_out, point_index.clone())?;
        let both = tape.concat_cols(&[f_geometric, f_identity])?;
        let f_fuse = self.fusion.forward(tape, store, both)?;
        Ok(GeometryVars {
            f_identity,
            f_geometric,
            f_fuse,
        })
    }
}

/// Evaluate all branches on `points` with a fresh voxelization.
pub fn fuse_features(
    store: &ParamStore,
    encoder: &GeometryEncoder,
    points: &[Vector3<f64>],
    grid_size: f64,
) -> Result<GeometryFeatures> {
    let grid = voxelize(points, grid_size)?;
    let plan = UNetPlan::new(&grid, UNET_LEVELS);
    let index: Arc<[usize]> = grid.point_to_voxel.clone().into();
    let mut tape = Tape::new();
    let x = tape.constant(points_tensor(points));
    let v = encoder.forward(&mut tape, store, x, &grid, &plan, &index)?;
    Ok(GeometryFeatures {
        f_identity: tape.value(v.f_identity).clone(),
        f_geometric: tape.value(v.f_geometric).clone(),
        f_fuse: tape.value(v.f_fuse).clone(),
    })
}

pub fn points_tensor(points: &[Vector3<f64>]) -> Tensor {
    Tensor::matrix(points.len(), 3, points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()).expect("3 columns")
}

/// Voxelization reused across iterations while no point has moved more than
/// half a voxel since it was built.
#[derive(Clone, Debug)]
pub struct VoxelCache {
    pub grid_size: f64,
    anchor: Vec<Vector3<f64>>,
    grid: Option<SparseVoxelGrid>,
    plan: Option<UNetPlan>,
    index: Arc<[usize]>,
    rebuilds: usize,
}

impl VoxelCache {
    pub fn new(grid_size: f64) -> Self {
        Self {
            grid_size,
            anchor: Vec::new(),
            grid: None,
            plan: None,
            index: Arc::from(Vec::new()),
            rebuilds: 0,
        }
    }

    /// Force a rebuild on the next [`Self::refresh`].
    pub fn invalidate(&mut self) {
        self.grid = None;
        self.plan = None;
    }

    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    pub fn anchor(&self) -> &[Vector3<f64>] {
        &self.anchor
    }

    pub fn is_stale(&self, points: &[Vector3<f64>]) -> bool {
        if self.grid.is_none() || points.len() != self.anchor.len() {
            return true;
        }
        let limit = 0.5 * self.grid_size;
        points.iter().zip(&self.anchor).any(|(p, a)| (p - a).amax() > limit)
    }

    /// Rebuild from `points` if stale; returns whether a rebuild happened.
    pub fn refresh(&mut self, points: &[Vector3<f64>]) -> Result<bool> {
        if !self.is_stale(points) {
            return Ok(false);
        }
        self.rebuild_from(points.to_vec())?;
        Ok(true)
    }

    /// Rebuild at a saved anchor (used when resuming).
    pub fn rebuild_from(&mut self, anchor: Vec<Vector3<f64>>) -> Result<()> {
        let grid = voxelize(&anchor, self.grid_size)?;
        self.plan = Some(UNetPlan::new(&grid, UNET_LEVELS));
        self.index = grid.point_to_voxel.clone().into();
        self.grid = Some(grid);
        self.anchor = anchor;
        self.rebuilds += 1;
        Ok(())
    }

    pub fn parts(&self) -> Result<(&SparseVoxelGrid, &UNetPlan, &Arc<[usize]>)> {
        match (&self.grid, &self.plan) {
            (Some(g), Some(p)) => Ok((g, p, &self.index)),
            _ => Err(Error::Consistency("voxel cache used before it was built".into())),
        }
    }
}

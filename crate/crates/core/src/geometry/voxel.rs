use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub type VoxelCoord = [i64; 3];

/// Occupied voxels of a point set, sorted lexicographically by coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVoxelGrid {
    pub grid_size: f64,
    pub voxel_coords: Vec<VoxelCoord>,
    /// `M × 3` input features: coordinates relative to the minimum corner,
    /// divided by the largest axis extent (at least 1).
    pub voxel_features: Tensor,
    pub point_to_voxel: Vec<usize>,
}

pub fn voxel_of(p: &Vector3<f64>, s: f64) -> VoxelCoord {
    [(p.x / s).floor() as i64, (p.y / s).floor() as i64, (p.z / s).floor() as i64]
}

pub fn voxelize(points: &[Vector3<f64>], s: f64) -> Result<SparseVoxelGrid> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Parameter(format!("grid size must be positive, got {s}")));
    }
    if points.is_empty() {
        return Err(Error::Parameter("cannot voxelize an empty point set".into()));
    }
    let keys: Vec<VoxelCoord> = points.iter().map(|p| voxel_of(p, s)).collect();
    let mut coords = keys.clone();
    coords.sort_unstable();
    coords.dedup();
    let index: HashMap<VoxelCoord, usize> = coords.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let point_to_voxel = keys.iter().map(|k| index[k]).collect();
    Ok(SparseVoxelGrid {
        grid_size: s,
        voxel_features: normalized_coords(&coords),
        voxel_coords: coords,
        point_to_voxel,
    })
}

impl SparseVoxelGrid {
    /// A grid from explicit coordinates, one point per voxel.
    pub fn from_coords(mut coords: Vec<VoxelCoord>, s: f64) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Parameter("empty voxel set".into()));
        }
        coords.sort_unstable();
        coords.dedup();
        Ok(Self {
            grid_size: s,
            voxel_features: normalized_coords(&coords),
            point_to_voxel: (0..coords.len()).collect(),
            voxel_coords: coords,
        })
    }

    pub fn num_voxels(&self) -> usize {
        self.voxel_coords.len()
    }

    pub fn num_points(&self) -> usize {
        self.point_to_voxel.len()
    }
}

fn normalized_coords(coords: &[VoxelCoord]) -> Tensor {
    let (lo, hi) = bounds(coords);
    let extent = (0..3).map(|a| hi[a] - lo[a]).max().unwrap_or(0).max(1) as f64;
    let data = coords
        .iter()
        .flat_map(|c| (0..3).map(move |a| (c[a] - lo[a]) as f64 / extent))
        .collect();
    Tensor::matrix(coords.len(), 3, data).expect("3 columns")
}

pub(crate) fn bounds(coords: &[VoxelCoord]) -> (VoxelCoord, VoxelCoord) {
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for c in coords {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    (lo, hi)
}

/// Default grid size: bounding-box diagonal / 64.
pub fn default_grid_size(points: &[Vector3<f64>]) -> f64 {
    let Some(first) = points.first() else { return 1.0 };
    let (mut lo, mut hi) = (*first, *first);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let d = (hi - lo).norm() / 64.0;
    if d > 0.0 { d } else { 1e-3 }
}

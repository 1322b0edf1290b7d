//! Geometry-aware point features: voxelization, a sparse U-Net over the
//! voxels, a per-point MLP and their fusion.

mod features;
mod unet;
mod voxel;

pub use features::{fuse_features, points_tensor, GeometryEncoder, GeometryFeatures, GeometrySpec, GeometryVars, VoxelCache};
pub use unet::{
    kernel_offset_index, sparse_unet_forward, SparseConv, SparseUNet, UNetPlan, UNetSpec, KERNEL_VOLUME, UNET_LEVELS,
};
pub use voxel::{default_grid_size, voxel_of, voxelize, SparseVoxelGrid, VoxelCoord};

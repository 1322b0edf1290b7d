//! Time-conditioned deformation of canonical Gaussians.

mod apply;
mod encoding;
mod network;

pub use apply::{apply_deformation, apply_deformation_backward, undeformed, ApplyGrad, DeformedGaussians, DeformedGrad, MIN_SCALE};
pub use encoding::positional_encode;
pub use network::{
    check_time, decode_deformation, deform_positions, DeformSpec, DeformationNetwork, DeformationOutput, VoxelInputs, DR, DS,
    DX, OUTPUT_WIDTH,
};

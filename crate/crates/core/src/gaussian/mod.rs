//! Canonical Gaussian scene: parameters, rotations, covariances and color.

mod cloud;
mod covariance;
pub mod ply;
mod rotation;
mod sh;

pub use cloud::{knn_scales, logit, rgb_to_dc, sigmoid, GaussianCloud, CLOUD_PARAMS};
pub use covariance::{build_covariance, covariance_backward, covariance_from_rotation};
pub use rotation::{f_v2m, f_v2m_backward, Rotation6D, DEGENERACY_EPS};
pub use sh::{eval_sh_backward, eval_sh_color, num_sh_coeffs, sh_basis, MAX_SH_DEGREE};

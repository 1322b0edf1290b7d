//! Datasets, toy-scene generation, and image metrics.

mod dnerf;
mod metrics;
mod toy;

pub use dnerf::{
    c2w_from_camera, camera_from_c2w, load_dnerf_dataset, write_transforms, Dataset, Frame, FrameRecord, SeedPoints, Split,
    Transforms,
};
pub use metrics::{mse, psnr, ssim, MSE_FLOOR};
pub use toy::{generate_toy_scene, orbit_camera, render_toy, toy_frames, Motion, Primitive, Shape, ToySceneSpec, PRESETS};

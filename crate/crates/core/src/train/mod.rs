//! Losses, density control, and the optimization loop.

mod config;
mod density;
mod loss;
mod pipeline;
mod trainer;

pub use config::{TrainConfig, CONFIG_KEYS};
pub use density::{
    adam_path, density_control, invert_to_canonical, split_children, DensifyConfig, DensifyReport, DensifyStats, SplitChild,
};
pub use loss::{
    gaussian_window, image_loss_with_grad, l1, motion_loss, motion_loss_grad, photometric_loss, ssim, ssim_with_grad, LossReport,
    DEFAULT_LAMBDA, DEFAULT_OMEGA, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use pipeline::{LossWeights, Model, ModelGrads, Phase, StepOutput};
pub use trainer::{camera_extent, iteration_rng, MetricsRow, Trainer, INIT_HALF_EXTENT, METRICS_HEADER};

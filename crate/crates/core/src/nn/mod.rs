//! Dense tensors, reverse-mode differentiation, MLPs, and the Adam optimizer.

mod adam;
pub mod checkpoint;
mod mlp;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState, ExpDecay};
pub use mlp::{forward_mlp, Activation, Init, Linear, Mlp, MlpSpec};
pub use tape::{ParamId, ParamStore, ParamTape, Tape, Var, NO_NEIGHBOR};
pub use tensor::Tensor;

//! Neural-network substrate shared by the dynamics model, critics and actors.

mod adam;
mod mlp;

pub use adam::{adam_step, AdamConfig, OptimizerState, VectorAdam};
pub use mlp::{gradient, polyak_update, Activation, Gradients, Layer, MlpParams, Tape};

//! Trainable parameters, forward passes and checkpoints.

mod checkpoint;
mod params;
mod qcea;

pub use checkpoint::Checkpoint;
pub use params::{glorot, init_store, GradientSet, NamedTensor, ParamStore, TensorSpec};
pub use qcea::{init_params, score, Activation, ModelConfig, QceaModel, TuckerRanks};

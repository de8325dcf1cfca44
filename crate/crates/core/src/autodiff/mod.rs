//! Exact gradients, the Adam optimizer and finite-difference verification.

mod adam;
mod fdcheck;
pub mod tape;

pub use adam::{adam_step, AdamConfig, AdamState, StepInfo};
pub use fdcheck::{fd_check, FdReport, TensorReport, FD_PARAM_LIMIT};
pub use tape::{LossGroup, NodeId, Tape};

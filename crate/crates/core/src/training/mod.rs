//! Sampling, the multi-positive objective and the training loop.

pub mod loss;
pub mod sampling;
mod train;

pub use loss::{info_nce, mp_loss, mp_loss_with_grad, total_loss, ObjectiveWeights};
pub use sampling::{training_examples, BatchItem, Sampler, SamplingConfig, TrainBatch, TrainExample};
pub use train::{
    dense_groups, fit, objective, train, ObjectiveValue, TrainConfig, TrainOutcome, TrainRecord, Trainable,
};

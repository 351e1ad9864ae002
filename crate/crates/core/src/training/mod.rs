mod metrics;
mod optim;
mod split;
mod trainer;

pub use metrics::{compute_metrics, predict, Metrics};
pub use optim::{Adam, ReduceLrOnPlateau, BETA1, BETA2, EPS};
pub use split::{split_dataset, split_indices, split_sizes, SplitIndices};
pub use trainer::{
    batch_order, batch_tensors, evaluate, log_header, train, EpochRecord, Evaluation, TrainConfig, TrainOutcome,
};

pub use crate::autodiff::bce_term as bce_with_logits;

//! The assembled multimodal network.

pub mod caf;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod inference;

pub use caf::{param_count, CafLayout, CafMamba, ForwardOut, Ufe};
pub use check::{group_errors, model_grad_check, GRAD_CHECK_STEP};
pub use config::{AttentionNorm, ModelConfig, LMVD_MODALITY_DIMS};
pub use inference::{InferenceModel, Prediction};

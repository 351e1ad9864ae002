pub mod autodiff;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod kernels;
pub mod model;
pub mod ssm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorError, TensorResult};

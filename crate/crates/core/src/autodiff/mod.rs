//! Reverse-mode automatic differentiation over a recorded tape.

mod backward;
pub mod gradcheck;
mod graph;
mod ops;
mod params;

pub use gradcheck::{grad_check, grad_check_store, grad_check_with_fault, relative_error, ParamCheck};
pub use graph::{BackwardFault, Graph, Var};
pub use ops::{bce_term, LAYER_NORM_EPS};
pub use params::{ParamId, ParamStore};

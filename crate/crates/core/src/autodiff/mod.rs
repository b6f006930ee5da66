//! Minimal dense reverse-mode differentiation.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_param, grad_check_report, GradCheckReport};
pub use graph::{sigmoid, Graph, Var};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;

/// Layer-norm variance floor used throughout.
pub const LAYER_NORM_EPS: f64 = 1e-5;

//! Reverse-mode automatic differentiation over dense f64 tensors.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, grad_check_sampled, GradCheckReport, GRAD_CHECK_FLOOR};
pub use graph::{Graph, Var};
pub use optim::{AdamWConfig, AdamWState};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

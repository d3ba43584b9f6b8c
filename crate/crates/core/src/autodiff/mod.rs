//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The primitive set is deliberately small: matmul, broadcasting add and
//! multiply, scale, ReLU, sigmoid, log-softmax, mean and reshape. Second-order
//! quantities needed by the meta step are obtained by recording a gradient
//! descent update inside a graph ([`sgd_step_recorded`]) rather than by
//! differentiating a backward pass.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck};
pub use graph::{sigmoid, Graph, Var};
pub use optim::{adam_step, sgd_step, sgd_step_recorded, AdamSettings, AdamState};
pub use params::{GradMap, ParamSet, ParamVars};
pub use tensor::Tensor;


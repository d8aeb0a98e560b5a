//! Reverse-mode differentiation over dense matrices, plus the Adam optimizer
//! and a central-difference gradient oracle.

mod check;
mod graph;
mod optim;
mod params;

pub use check::{finite_diff_grad, max_relative_error};
pub use graph::{Gradients, Graph, Shape, Var};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, OptimState};
pub use params::{backward_grad, collect, ParamHandle, ParamVector, Segment};

pub(crate) use graph::{matmul_into, softplus};

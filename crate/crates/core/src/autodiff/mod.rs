//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! with the optimizer and schedule used for training.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{cosine_lr, Adam};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

//! Dense tensors, reverse-mode autodiff and the SGD optimizer.

mod dense;
mod gradcheck;
mod graph;
mod optim;

pub use dense::Tensor;
pub use gradcheck::{eval_loss, grad_check, GradCheckReport, Subsample};
pub use graph::{softmax_rows, Axis, Gradients, Graph, Var};
pub use optim::{CosineSchedule, OptimizerState, ParamSet};

//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! Every backward rule is written in terms of the same differentiable
//! operations, so a gradient computed with `create_graph = true` can be
//! differentiated again. Gradient-matching objectives (a loss defined on
//! the parameter gradient of another loss) rely on this.

mod conv;
mod ops;
pub mod optim;
mod var;

pub use ops::zeros;
pub use var::{grad, grad_enabled, no_grad, NoGradGuard, Var};

/// Dense f64 tensor with dynamic rank.
pub type Tensor = ndarray::ArrayD<f64>;

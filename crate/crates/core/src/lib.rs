//! Federated training with gradient-inversion attacks and defenses.

pub mod attacks;
pub mod data;
pub mod defenses;
pub mod error;
pub mod fl;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod shadow;
pub mod tensors;

pub use error::{Error, Result};
pub use tensors::{GradientSet, Tensors};

//! Minimal deterministic tensor arithmetic with reverse-mode differentiation.
//!
//! Everything is `f64`. A [`Graph`] is rebuilt for every forward pass; parameters enter it as
//! named leaves and [`Graph::backward`] returns their gradients by name.

mod error;
pub mod gradcheck;
mod graph;
mod rng;
mod tensor;

pub use error::{NumError, Result};
pub use graph::{Gradients, Graph, Var};
pub use rng::{uniform, Rng};
pub use tensor::Tensor;

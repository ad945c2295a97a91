//! Tensors, reverse-mode differentiation, special functions and seeded RNG.

pub mod autodiff;
pub mod rng;
pub mod special;
pub mod tensor;

pub use autodiff::{softmax, Gradients, Graph, OpKind, Var};
pub use rng::RngStream;
pub use special::{digamma, lgamma};
pub use tensor::Tensor;

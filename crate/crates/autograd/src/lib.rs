//! Tape-based reverse-mode automatic differentiation over flat CPU tensors.
//!
//! A [`Graph`] records every operation of a forward pass; [`Graph::backward`]
//! replays the tape in reverse, computing vector-Jacobian products with a
//! fixed, sequential reduction order so that gradients are bitwise
//! reproducible run to run. The element type is generic: f32 for production
//! training and f64 where finite-difference verification needs the headroom.

mod conv;
mod element;
mod graph;
mod norm;
mod tensor;

pub mod gemm;

pub use element::Element;
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

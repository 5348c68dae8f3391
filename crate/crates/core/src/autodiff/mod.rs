//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an append-only arena: every operation pushes a node whose
//! parents already exist, so creation order is a valid topological order and
//! [`Graph::backward`] is a single reverse sweep. Graphs own no shared state
//! and can be built on separate threads.

pub mod gradcheck;
mod graph;
mod tensor;

#[cfg(test)]
pub(crate) use graph::log_sum_exp;
pub use graph::{log_sigmoid, sigmoid, Graph, Node, Op, Var};
pub use tensor::Tensor;

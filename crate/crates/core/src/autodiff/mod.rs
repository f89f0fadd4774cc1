//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation as it is evaluated; a single call to
//! [`Graph::backward`] then returns gradients for all leaves created with
//! [`Graph::param`]. Graphs are rebuilt for every step.

pub mod check;
mod graph;
pub mod kernels;

pub use graph::{Axis, Gradients, Graph, OpKind, Var, LAYERNORM_EPS};

#[cfg(test)]
mod tests;

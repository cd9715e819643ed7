//! Reverse-mode differentiation over NCHW tensors.

mod graph;
pub(crate) mod kernels;

pub use graph::{Graph, Reduction, Var};

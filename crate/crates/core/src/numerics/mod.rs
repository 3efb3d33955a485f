// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense 64-bit tensors, kernels, and a reverse-mode autodiff graph.

mod grad_check;
mod graph;
pub mod kernels;
mod tensor;

pub use grad_check::{finite_diff_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use graph::{backward, evaluate, forward, Activation, Evaluation, Graph, Node, NodeId, Op, Params};
pub use tensor::{argmax, Tensor};

//! Dense tensors with a reverse-mode autodiff tape.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use graph::{AttnMask, Graph, Var};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;

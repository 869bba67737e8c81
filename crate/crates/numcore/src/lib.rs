//! Dense `f64` tensors, a recording tape for reverse-mode gradients, and a
//! finite-difference checker for validating them.

mod error;
pub mod gradcheck;
mod graph;
mod tensor;
mod topk;

pub use error::{NumError, Result};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, DEFAULT_EPS};
pub use graph::{matmul_raw, Gradients, Graph, Var};
pub use tensor::Tensor;
pub use topk::{argmax, topk};

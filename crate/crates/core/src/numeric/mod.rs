//! Dense tensors, a reverse-mode tape, and a finite-difference checker.

pub mod gradcheck;
pub mod graph;
pub(crate) mod kernels;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, GradCheck};
pub use graph::{ConvGeom, Gradients, Graph, Var};
pub use tensor::{topk, AttnMask, Float, Tensor};

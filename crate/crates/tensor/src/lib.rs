//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles;
//! [`Graph::backward`] sweeps the tape once in reverse. Pure forward kernels
//! are exported separately so tape-free inference paths share the exact
//! arithmetic of the recorded ops.

mod error;
pub mod gemm;
pub mod gradcheck;
mod graph;
pub mod ops;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_refined, grad_check_sampled, GradCheckReport};
pub use graph::{Backward, BackwardCtx, Gradients, Graph, Var};
pub use ops::conv::ConvGeometry;
pub use ops::norm::NORM_EPS;
pub use scalar::Scalar;
pub use tensor::Tensor;

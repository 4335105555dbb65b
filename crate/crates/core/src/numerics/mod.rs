//! Dense tensors, reverse-mode gradients over the model's primitive set,
//! and symmetric eigen-utilities.

mod eig;
mod tape;
mod tensor;

pub use eig::{inv_sqrt_psd, inv_sqrt_psd_report, sym_eig, InvSqrt, EIGEN_FLOOR};
pub use tape::{grad, BatchStats, GradTape, Gradients, Var};
pub use tensor::{matmul, sign, Tensor};



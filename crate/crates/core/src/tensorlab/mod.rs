//! Dense float64 tensors with a reverse-mode tape, sized for a tiny 3D CNN.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, Differentiable, GradCheckReport, TapeFn, RELATIVE_FLOOR};
pub use kernels::{log_softmax, softmax};
pub use tape::{BatchStats, Conv3dParams, Gradients, LossTerm, Tape, Target, Var, BN_EPS};
pub use tensor::Tensor;

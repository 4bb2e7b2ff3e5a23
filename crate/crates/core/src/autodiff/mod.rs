//! Dense `f64` tensors, a reverse-mode tape, finite-difference checking and
//! the AdamW optimizer.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions};
pub use optim::{AdamW, AdamWConfig, AdamWState};
pub use params::{Binding, ParamStore};
pub use tape::{sigmoid, softplus, Gradients, PlaneAxis, Tape, Unary, Var};
pub use tensor::Tensor;

pub(crate) use tape::{plane_mean_kernel, softmax_rows, tpv_aggregate_kernel};

//! Dense tensors, reverse-mode differentiation, losses and optimiser.

mod attention;
mod gradcheck;
mod loss;
mod ops;
mod optim;
mod rng;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, ParamCheck, DEFAULT_STEP};
pub use loss::KL_FLOOR;
pub use optim::{adamw_update, AdamW, AdamWConfig};
pub use rng::{Rng, RngState};
pub use scalar::{DType, Scalar};
pub use tensor::{is_grad_enabled, no_grad, Tensor, MAX_RANK};

//! Minimal dense-tensor computation with reverse-mode gradients and a
//! finite-difference oracle.

pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{central_difference, grad_check, max_relative_error, DEFAULT_STEP};
pub use optim::{OptimConfig, OptimMode, OptimState};
pub use tape::{NodeId, Tape, LAYER_NORM_EPS};
pub use tensor::{masked_softmax_rows, sigmoid, sigmoid_derivative, softmax_rows, Tensor2};

//! Dense-tensor primitives, the reverse-mode tape built on them, and the
//! finite-difference gradient checker every trainable operation is held to.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_coords, FnObjective, GradCheckReport, ScalarObjective};
pub use ops::{
    activation, depthwise_conv1d, layer_norm, linear_map, matmul, rms_norm, sigmoid, silu, softplus, Activation, Padding, NORM_EPS,
};
pub use tape::{Grads, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

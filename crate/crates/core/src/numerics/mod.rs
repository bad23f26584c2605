//! Dense tensors, the three differentiable layer primitives and the
//! finite-difference oracle that every gradient test leans on.

mod batchnorm;
mod gradcheck;
mod layers;
mod rng;
mod tensor;

pub use batchnorm::{group_bn_backward, group_bn_forward, BnCache, BnGrads};
pub use gradcheck::{finite_difference_gradient, relative_error};
pub use layers::{
    affine_backward, affine_forward, l2_normalize, l2_normalize_backward, relu_backward,
    relu_forward, AffineCache, AffineGrads, L2Cache,
};
pub use rng::RngStream;
pub use tensor::Tensor;

/// Batch-norm epsilon used throughout the encoder.
pub const BN_EPS: f64 = 1e-5;

/// Rows with a norm at or below this are rejected by [`l2_normalize`].
pub const MIN_ROW_NORM: f64 = 1e-12;

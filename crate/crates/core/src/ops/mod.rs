//! Layer primitives with explicit forward and backward passes.

mod basic;
mod conv;
pub mod gemm;
mod loss;
mod norm;

pub use basic::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, residual_add, Linear,
};
pub use conv::{conv2d, ConvCache, ConvParams};
pub use loss::{
    cross_entropy, kd_loss, one_hot, softmax_cross_entropy_grad, softmax_temp, KdOutput,
    PROB_FLOOR,
};
pub use norm::{BatchNormParams, BnCache, Mode};

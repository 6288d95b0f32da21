//! Differentiable operators with hand-written backward passes, losses,
//! Adam, finite-difference gradient checking and weight serialization.
//!
//! There is no autodiff graph. Each op exposes a forward function and a
//! matching backward function; networks keep their own activations and
//! call the backward functions in reverse order.

mod adam;
pub mod gradcheck;
mod init;
mod layers;
mod loss;
mod ops;
mod param;
mod real;
mod serialize;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use init::{he_uniform, uniform_bias};
pub use layers::{Conv2d, Dense, DepthwiseConv2d};
pub use loss::{
    dice_bce_loss, dice_bce_with_logits, softmax_cross_entropy_grad, weighted_cross_entropy,
    DiceBce,
};
pub use ops::{
    concat_channels, conv2d, conv2d_backward, dense, dense_backward, depthwise_conv2d,
    depthwise_conv2d_backward, global_avg_pool, global_avg_pool_backward, max_pool2d,
    max_pool2d_backward, relu, relu_backward, sigmoid, sigmoid_backward, softmax,
    split_channels, upsample_nearest2x, upsample_nearest2x_backward, ConvGrads, DenseGrads,
    Padding, PoolIndices,
};
pub use param::{Module, Parameter};
pub use real::Real;
pub use serialize::{
    load_module, module_tensors, read_weights, read_weights_file, write_weights, write_weights_file,
    NamedTensor, WEIGHTS_MAGIC,
};
pub use tensor::Tensor;

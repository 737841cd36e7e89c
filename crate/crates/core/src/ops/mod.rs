//! Forward and backward kernels for the layer types of the network.
//!
//! Every op is a pure function of its inputs. Backward functions take the
//! upstream gradient together with whatever the forward pass needs to be
//! replayed and return gradients for all differentiable inputs.

mod activation;
mod batchnorm;
mod conv;
mod loss;

pub use activation::{add, channel_concat, relu, relu_backward, split_channels};
pub use batchnorm::{
    batchnorm, batchnorm_backward, batchnorm_forward, BatchNormState, BnCache, BnGrads, BnMode, RunningStats,
    BN_EPS, BN_MOMENTUM,
};
pub use conv::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, same_padding, ConvGrads,
    ConvSpec,
};
pub use loss::{mse, mse_backward};

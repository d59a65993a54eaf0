//! Standard layers as pure forward/backward function pairs.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod pool;

pub use activation::{prelu_backward, prelu_forward, relu_backward, relu_forward, PReluParams};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormState, BnCache, BnMode};
pub use conv::{
    conv_backward, conv_backward_cached, conv_forward, conv_forward_cached, ConvCache, ConvGrads,
    ConvParams,
};
pub use linear::{argmax_rows, linear_backward, linear_forward, softmax_xent, LinearParams};
pub use pool::{
    global_avgpool_backward, global_avgpool_forward, spatial_maxpool_backward,
    spatial_maxpool_forward, MaxPoolCache,
};

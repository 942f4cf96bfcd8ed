//! Layer kernels with analytic forward and backward passes.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod pool;

pub use activation::{relu, relu_backward};
pub use batchnorm::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, BnBatchStats, BnCache, BnGrads, BnMode,
    BnParams,
};
pub use conv::{
    conv3d, conv3d_backward, transposed_conv3d, transposed_conv3d_backward, ConvGrads, ConvParams,
};
pub use pool::{
    avgpool3d, avgpool3d_backward, maxpool3d, maxpool3d_backward, pool_output_dims, MaxPoolCache,
    PoolKind,
};

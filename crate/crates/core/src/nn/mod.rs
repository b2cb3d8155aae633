//! Minimal CPU network engine: flat parameter vectors, im2col convolutions
//! over `matrixmultiply`, and hand-written backward passes.

mod checkpoint;
mod layers;
mod optim;
mod real;
mod tensor;

pub use checkpoint::{probs_to_tensor, tensor_to_probs, Checkpoint, CheckpointHeader, Normalization};
pub use layers::{
    leaky_relu, leaky_relu_apply, max_pool2, softmax_backward, softmax_channels, upsample2,
    upsample2_backward, AngularPadding, Conv2d, ConvCache, Dense, PoolCache,
};
pub use optim::{RmsProp, RmsPropConfig};
pub use real::Real;
pub use tensor::{ParamLayout, ParamSpec, Tensor};

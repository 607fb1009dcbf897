//! Differentiable layer primitives used by the codec.

mod activation;
mod conv;
mod optim;
mod shuffle;

pub use activation::{activation, activation_backward, Activation, LEAKY_SLOPE};
pub use conv::{conv2d, conv2d_backward, deconv2d, deconv2d_backward, ConvGrads, ConvWeights, WeightLayout};
pub use optim::{Optimizer, OptimizerKind};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};

//! Dense tensor math with reverse-mode gradients.

mod graph;
pub mod gradcheck;
mod kernels;
pub mod layers;
mod rng;
mod scalar;
mod tensor;

pub use graph::{Graph, Var, BCE_CLAMP, LAYER_NORM_EPS};
pub use gradcheck::{grad_check, GradCheckReport, LossEval};
pub use layers::{
    dropout, feed_forward, layer_norm, leaky_relu, multi_head_attention, scaled_dot_attention,
    softmax, xavier_init, AttentionParams, FeedForwardParams,
};
pub use rng::{Rng, RngState};
pub use scalar::Scalar;
pub use tensor::Tensor;

//! Differentiable primitives the model is assembled from: 2-D tensors, a
//! reverse-mode tape, a named parameter registry and transformer layers.

mod gradcheck;
mod graph;
pub mod nn;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use graph::{Backprop, Graph, Var};
pub use nn::{
    attention_heads, linear, positions_table, sinusoid_at, sinusoidal_position_encoding,
    FeedForward, LayerNorm, Linear, MultiHeadAttention,
};
pub use params::{init_embedding, init_uniform, Grads, ParamId, ParamSet};
pub use tensor::{FloatOps, Real, Tensor};

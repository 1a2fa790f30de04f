//! Dense tensors, reverse-mode differentiation, layers and optimization.

pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use nn::{AttnWeights, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use params::{ParamGrads, ParamId, ParamStore, Parameter};
pub use rng::SeededRng;
pub use tensor::Tensor;

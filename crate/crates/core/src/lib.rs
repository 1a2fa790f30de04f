pub mod baselines;
mod codec;
pub mod error;
pub mod model;
pub mod numerics;
pub mod reasoner;
pub mod sampler;
pub mod synthgen;
pub mod tformer;
pub mod trainer;

pub use error::{Error, Result};

//! State-wise safe reinforcement learning from pixel observations.
//!
//! A recurrent latent world model is learned from rendered images, a
//! barrier-like scalar function over its latent space encodes which states
//! are safe, and an actor-critic policy is optimized inside the model with
//! the barrier violations as a regularizer.

pub mod autodiff;
pub mod barrier;
pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod evaluate;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result, TensorError};
pub use tensor::Tensor;

//! Progressive multi-source domain alignment over a toy frozen
//! dual-encoder: ensemble pseudo-labeling, balanced-cluster curricula,
//! prompt and parameter-efficient tuning with an autoencoder alignment
//! objective, and a confidence-gated refine-and-rehearse loop.
//!
//! All numeric components are generic over [`Scalar`]; training runs in
//! `f32` and gradient checks in `f64`.

pub mod alignment;
pub mod curriculum;
pub mod data_io;
pub mod encoders;
pub mod error;
pub mod peft;
pub mod prompt_bank;
pub mod pseudo_labeler;
pub mod rehearse_pipeline;
mod rng;
pub mod scalar;
pub mod tensor;

pub use rng::stream_rng;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;

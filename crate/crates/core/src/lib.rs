//! Federated pre-training of a graph vector-quantized autoencoder across
//! clients from different graph domains, with anchor-based codebook
//! initialization and per-client prompts pooled for fine-tuning.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the storage type.

pub mod anchor_init;
pub mod digest;
pub mod downstream;
pub mod error;
pub mod federation;
pub mod graph;
pub mod optim;
pub mod prompt_pool;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod vqvae;

pub use error::{Error, ErrorCategory, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = graph::TextAttributedGraph<f64>;
pub type Graph32 = graph::TextAttributedGraph<f32>;
pub type GfmParams64 = vqvae::GfmParams<f64>;
pub type GfmParams32 = vqvae::GfmParams<f32>;
pub type PromptSet64 = prompt_pool::PromptSet<f64>;
pub type PromptPool64 = prompt_pool::PromptPool<f64>;
pub type Federation64 = federation::Federation<f64>;
pub type Federation32 = federation::Federation<f32>;
pub type TaskHead64 = downstream::TaskHead<f64>;

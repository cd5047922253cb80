//! Latent accompaniment generation at desk scale: a Diffusion Transformer
//! trained either with EDM-style diffusion or with consistency training, a
//! diffusion bridge between two embedding modalities, synthetic data sources
//! and the objective metrics used to compare them.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod bridge;
pub mod checkpoint;
pub mod consistency;
pub mod dit;
pub mod edm;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use net::Network;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Dit32 = dit::Dit<f32>;
pub type Dit64 = dit::Dit<f64>;

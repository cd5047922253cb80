//! Diffusion Transformer backbone.

mod cond;
mod config;
mod embed;
mod model;
mod patch;

pub use cond::{CondBatch, ConditioningBundle, Dropped};
pub use config::DitConfig;
pub use embed::{sinusoidal_batch, sinusoidal_embed};
pub use model::{dit_param_count, Dit};
pub use patch::{patchify, token_count, unpatchify, LatentSequence, Tokens};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Classifier-free guidance: `uncond + weight * (cond - uncond)`, evaluated as
/// `weight * cond + (1 - weight) * uncond` so that weights 0 and 1 reproduce
/// their inputs exactly.
pub fn cfg_combine<T: Scalar>(cond_out: &Tensor<T>, uncond_out: &Tensor<T>, weight: T) -> Result<Tensor<T>> {
    let rest = T::one() - weight;
    cond_out.zip_map(uncond_out, |c, u| weight * c + rest * u)
}

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Shape of a Diffusion Transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitConfig {
    pub model_dim: usize,
    pub mlp_multiplier: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub patch_size: usize,
    /// Width of the sinusoidal noise-level embedding; also the width of the
    /// conditioning vector that feeds every AdaLN projection.
    pub noise_embed_dim: usize,
    pub latent_channels: usize,
    /// 0 disables context tokens.
    pub context_channels: usize,
    /// 0 disables the style pathway.
    pub style_embed_dim: usize,
    /// Longest sequence (in frames) the learned positional tables cover.
    pub max_len: usize,
    /// Depthwise convolution width after the Q, K, V projections.
    pub dw_kernel: usize,
    /// Per-field classifier-free dropout probability during training.
    pub cond_dropout: f64,
}

impl DitConfig {
    /// Published architecture: width 1024, MLP x4, 4 heads, 18 layers and a
    /// 512-wide noise embedding.
    pub fn paper_reference() -> Self {
        Self {
            model_dim: 1024,
            mlp_multiplier: 4,
            num_heads: 4,
            num_layers: 18,
            patch_size: 1,
            noise_embed_dim: 512,
            latent_channels: 64,
            context_channels: 64,
            style_embed_dim: 512,
            max_len: 256,
            dw_kernel: 3,
            cond_dropout: 0.1,
        }
    }

    /// Laptop-sized default.
    pub fn desk() -> Self {
        Self {
            model_dim: 64,
            mlp_multiplier: 4,
            num_heads: 2,
            num_layers: 4,
            patch_size: 2,
            noise_embed_dim: 64,
            latent_channels: 8,
            context_channels: 8,
            style_embed_dim: 64,
            max_len: 64,
            dw_kernel: 3,
            cond_dropout: 0.1,
        }
    }

    /// Unconditional network for short analytic toy sequences.
    pub fn toy(latent_channels: usize, max_len: usize) -> Self {
        Self {
            model_dim: 32,
            mlp_multiplier: 2,
            num_heads: 2,
            num_layers: 2,
            patch_size: 1,
            noise_embed_dim: 32,
            latent_channels,
            context_channels: 0,
            style_embed_dim: 0,
            max_len,
            dw_kernel: 3,
            cond_dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.model_dim > 0 && self.num_heads > 0 && self.model_dim.is_multiple_of(self.num_heads), || {
            format!("model_dim {} must be divisible by num_heads {}", self.model_dim, self.num_heads)
        })?;
        ensure(
            self.mlp_multiplier > 0 && self.num_layers > 0 && self.patch_size > 0 && self.latent_channels > 0,
            || "mlp_multiplier, num_layers, patch_size and latent_channels must be positive".into(),
        )?;
        ensure(self.noise_embed_dim > 0 && self.noise_embed_dim.is_multiple_of(2), || "noise_embed_dim must be even".into())?;
        ensure(self.max_len > 0 && self.dw_kernel % 2 == 1, || "max_len > 0 and odd dw_kernel".into())?;
        ensure((0.0..=1.0).contains(&self.cond_dropout), || "cond_dropout must be a probability".into())
    }

    pub fn max_tokens(&self) -> usize {
        self.max_len.div_ceil(self.patch_size)
    }
}

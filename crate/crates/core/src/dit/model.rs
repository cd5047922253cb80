//! Diffusion Transformer with AdaLN-Zero blocks and depthwise-convolved
//! attention projections.

use super::cond::CondBatch;
use super::config::DitConfig;
use super::embed::sinusoidal_batch;
use super::patch::token_count;
use crate::error::{ensure, Error, Result};
use crate::net::Network;
use crate::params::{count_params, Init, LinearIdx, ParamSpec, ParamStore, SpecBuilder};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;
const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
struct BlockIdx {
    ada: LinearIdx,
    q: LinearIdx,
    k: LinearIdx,
    v: LinearIdx,
    dw_q: usize,
    dw_k: usize,
    dw_v: usize,
    out: LinearIdx,
    fc1: LinearIdx,
    fc2: LinearIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    x_proj: LinearIdx,
    pos_x: usize,
    ctx: Option<(LinearIdx, usize, usize)>,
    style: Option<(LinearIdx, usize)>,
    t_mlp1: LinearIdx,
    t_mlp2: LinearIdx,
    blocks: Vec<BlockIdx>,
    final_ada: LinearIdx,
    head: LinearIdx,
}

fn layout(cfg: &DitConfig) -> (Layout, Vec<ParamSpec>) {
    let d = cfg.model_dim;
    let ne = cfg.noise_embed_dim;
    let p = cfg.patch_size;
    let tmax = cfg.max_tokens();
    let mut b = SpecBuilder::new();
    let x_proj = b.linear("x_proj", p * cfg.latent_channels, d);
    let pos_x = b.tensor("pos_x", &[tmax, d], Init::Normal(EMBED_INIT_STD));
    let ctx = (cfg.context_channels > 0).then(|| {
        let proj = b.linear("ctx_proj", p * cfg.context_channels, d);
        let pos = b.tensor("pos_ctx", &[tmax, d], Init::Normal(EMBED_INIT_STD));
        let null = b.tensor("null_ctx", &[d], Init::Normal(EMBED_INIT_STD));
        (proj, pos, null)
    });
    let style = (cfg.style_embed_dim > 0).then(|| {
        let proj = b.linear("style_proj", cfg.style_embed_dim, ne);
        let null = b.tensor("null_style", &[cfg.style_embed_dim], Init::Normal(EMBED_INIT_STD));
        (proj, null)
    });
    let t_mlp1 = b.linear("noise_mlp.0", ne, ne);
    let t_mlp2 = b.linear("noise_mlp.1", ne, ne);
    let blocks = (0..cfg.num_layers)
        .map(|i| {
            let n = |s: &str| format!("blocks.{i}.{s}");
            BlockIdx {
                ada: b.zero_linear(&n("ada"), ne, 6 * d),
                q: b.linear(&n("attn.q"), d, d),
                k: b.linear(&n("attn.k"), d, d),
                v: b.linear(&n("attn.v"), d, d),
                dw_q: b.tensor(n("attn.dw_q"), &[d, cfg.dw_kernel], Init::Delta),
                dw_k: b.tensor(n("attn.dw_k"), &[d, cfg.dw_kernel], Init::Delta),
                dw_v: b.tensor(n("attn.dw_v"), &[d, cfg.dw_kernel], Init::Delta),
                out: b.linear(&n("attn.out"), d, d),
                fc1: b.linear(&n("mlp.fc1"), d, cfg.mlp_multiplier * d),
                fc2: b.linear(&n("mlp.fc2"), cfg.mlp_multiplier * d, d),
            }
        })
        .collect();
    let final_ada = b.zero_linear("final.ada", ne, 2 * d);
    let head = b.zero_linear("final.head", d, p * cfg.latent_channels);
    let l = Layout { x_proj, pos_x, ctx, style, t_mlp1, t_mlp2, blocks, final_ada, head };
    (l, b.finish())
}

/// Parameter count implied by `cfg`, without allocating weights.
pub fn dit_param_count(cfg: &DitConfig) -> usize {
    count_params(&layout(cfg).1)
}

/// The denoising network `F`.
#[derive(Clone, Debug)]
pub struct Dit<T> {
    config: DitConfig,
    layout: Layout,
    store: ParamStore<T>,
}

impl<T: Scalar> Dit<T> {
    /// AdaLN-Zero initialization: every residual gate and the output head start at zero.
    pub fn new(config: DitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        let store = ParamStore::initialize(&specs, seed);
        Ok(Self { config, layout, store })
    }

    pub fn config(&self) -> &DitConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Dit<U> {
        Dit { config: self.config.clone(), layout: self.layout.clone(), store: self.store.cast() }
    }

    fn lin(&self, tape: &mut Tape<T>, p: &[Var], x: Var, l: LinearIdx) -> Result<Var> {
        tape.linear(x, p[l.w], Some(p[l.b]))
    }

    /// `x * (1 + scale) + shift`, with per-example `scale`/`shift` rows.
    fn modulate(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var, groups: usize) -> Result<Var> {
        let scaled = tape.group_mul(x, scale, groups)?;
        let y = tape.add(x, scaled)?;
        tape.group_add(y, shift, groups)
    }

    /// `[batch, len, channels]` -> `[batch * tokens, patch * channels]`, zero-padded.
    fn to_tokens(tape: &mut Tape<T>, x: Var, batch: usize, len: usize, ch: usize, patch: usize) -> Result<Var> {
        let tokens = token_count(len, patch);
        let rows = tape.reshape(x, &[batch * len, ch])?;
        let padded_len = tokens * patch;
        let rows = if padded_len > len {
            let pad = tape.constant(&Tensor::zeros(&[batch * (padded_len - len), ch]));
            tape.concat_seq(rows, pad, batch)?
        } else {
            rows
        };
        tape.reshape(rows, &[batch * tokens, patch * ch])
    }

    fn check(tape: &Tape<T>, v: Var, layer: &str) -> Result<()> {
        if tape.is_finite(v) {
            Ok(())
        } else {
            Err(Error::Divergence(format!("non-finite activations after layer {layer}")))
        }
    }

    fn block(&self, tape: &mut Tape<T>, p: &[Var], h: Var, c: Var, blk: &BlockIdx, groups: usize) -> Result<Var> {
        let d = self.config.model_dim;
        let mods = self.lin(tape, p, c, blk.ada)?;
        let part = |tape: &mut Tape<T>, i: usize| tape.slice_cols(mods, i * d, d);
        let (shift1, scale1, gate1) = (part(tape, 0)?, part(tape, 1)?, part(tape, 2)?);
        let (shift2, scale2, gate2) = (part(tape, 3)?, part(tape, 4)?, part(tape, 5)?);

        let n = tape.layer_norm(h, T::of(LN_EPS));
        let m = Self::modulate(tape, n, shift1, scale1, groups)?;
        let a = self.attention(tape, p, m, blk, groups)?;
        let a = tape.group_mul(a, gate1, groups)?;
        let h = tape.add(h, a)?;

        let n = tape.layer_norm(h, T::of(LN_EPS));
        let m = Self::modulate(tape, n, shift2, scale2, groups)?;
        let f = self.lin(tape, p, m, blk.fc1)?;
        let f = tape.silu(f);
        let f = self.lin(tape, p, f, blk.fc2)?;
        let f = tape.group_mul(f, gate2, groups)?;
        tape.add(h, f)
    }

    fn attention(&self, tape: &mut Tape<T>, p: &[Var], x: Var, blk: &BlockIdx, groups: usize) -> Result<Var> {
        let q = self.lin(tape, p, x, blk.q)?;
        let q = tape.dw_conv(q, p[blk.dw_q], groups)?;
        let k = self.lin(tape, p, x, blk.k)?;
        let k = tape.dw_conv(k, p[blk.dw_k], groups)?;
        let v = self.lin(tape, p, x, blk.v)?;
        let v = tape.dw_conv(v, p[blk.dw_v], groups)?;
        let a = tape.attention(q, k, v, groups, self.config.num_heads)?;
        self.lin(tape, p, a, blk.out)
    }

    /// Summed noise-level and style embedding, `[batch, noise_embed_dim]`.
    fn cond_embedding(&self, tape: &mut Tape<T>, p: &[Var], c_noise: &[T], cond: &CondBatch<T>) -> Result<Var> {
        let b = c_noise.len();
        let ne = self.config.noise_embed_dim;
        let sin = Tensor::new(vec![b, ne], sinusoidal_batch(c_noise, ne)?)?;
        let sin = tape.constant(&sin);
        let t = self.lin(tape, p, sin, self.layout.t_mlp1)?;
        let t = tape.silu(t);
        let mut emb = self.lin(tape, p, t, self.layout.t_mlp2)?;
        if let Some((proj, null)) = self.layout.style {
            let sd = self.config.style_embed_dim;
            let style = match &cond.style {
                Some(s) => {
                    ensure(s.shape() == [b, sd], || format!("style {:?}, expected [{b}, {sd}]", s.shape()))?;
                    tape.constant(s)
                }
                None => tape.constant(&Tensor::zeros(&[b, sd])),
            };
            let mask = if cond.style.is_some() { cond.drop_style.clone() } else { vec![true; b] };
            let style = tape.replace_groups(style, p[null], mask)?;
            let s = self.lin(tape, p, style, proj)?;
            emb = tape.add(emb, s)?;
        }
        Ok(emb)
    }
}

impl<T: Scalar> Network<T> for Dit<T> {
    type Cond = CondBatch<T>;

    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn forward_tape(&self, tape: &mut Tape<T>, p: &[Var], x_in: Var, c_noise: &[T], cond: &CondBatch<T>) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(x_in).to_vec();
        ensure(shape.len() == 3 && shape[2] == cfg.latent_channels, || {
            format!("DiT input {shape:?}, expected [batch, len, {}]", cfg.latent_channels)
        })?;
        let (b, len) = (shape[0], shape[1]);
        ensure(len <= cfg.max_len, || format!("sequence length {len} exceeds max_len {}", cfg.max_len))?;
        ensure(c_noise.len() == b && cond.batch() == b, || "batch size disagrees across inputs".into())?;
        let tx = token_count(len, cfg.patch_size);
        let d = cfg.model_dim;

        let tok = Self::to_tokens(tape, x_in, b, len, cfg.latent_channels, cfg.patch_size)?;
        let h = self.lin(tape, p, tok, self.layout.x_proj)?;
        let mut h = tape.add_rows(h, p[self.layout.pos_x], b)?;

        let mut tc = 0;
        if let Some((proj, pos, null)) = self.layout.ctx {
            let (ctx, mask) = match &cond.context {
                Some(c) => {
                    let cs = c.shape();
                    ensure(cs.len() == 3 && cs[0] == b && cs[2] == cfg.context_channels && cs[1] <= cfg.max_len, || {
                        format!("context {cs:?} incompatible with batch {b} / {} channels", cfg.context_channels)
                    })?;
                    let cv = tape.constant(c);
                    tc = token_count(cs[1], cfg.patch_size);
                    let ct = Self::to_tokens(tape, cv, b, cs[1], cfg.context_channels, cfg.patch_size)?;
                    (self.lin(tape, p, ct, proj)?, cond.drop_context.clone())
                }
                None => {
                    tc = tx;
                    (tape.constant(&Tensor::zeros(&[b * tc, d])), vec![true; b])
                }
            };
            let ctx = tape.replace_groups(ctx, p[null], mask)?;
            let ctx = tape.add_rows(ctx, p[pos], b)?;
            h = tape.concat_seq(ctx, h, b)?;
        }

        let c = self.cond_embedding(tape, p, c_noise, cond)?;
        let c = tape.silu(c);
        for (i, blk) in self.layout.blocks.iter().enumerate() {
            h = self.block(tape, p, h, c, blk, b)?;
            Self::check(tape, h, &i.to_string())?;
        }

        let mods = self.lin(tape, p, c, self.layout.final_ada)?;
        let shift = tape.slice_cols(mods, 0, d)?;
        let scale = tape.slice_cols(mods, d, d)?;
        let n = tape.layer_norm(h, T::of(LN_EPS));
        let m = Self::modulate(tape, n, shift, scale, b)?;
        let out = self.lin(tape, p, m, self.layout.head)?;
        Self::check(tape, out, "head")?;
        let out = if tc > 0 { tape.slice_seq(out, b, tc, tx)? } else { out };

        let frames = tape.reshape(out, &[b * tx * cfg.patch_size, cfg.latent_channels])?;
        let frames = if tx * cfg.patch_size > len { tape.slice_seq(frames, b, 0, len)? } else { frames };
        tape.reshape(frames, &[b, len, cfg.latent_channels])
    }

    fn with_null_half(&self, cond: &CondBatch<T>) -> Result<CondBatch<T>> {
        cond.with_null_half()
    }
}

//! Diffusion model over audio-side embeddings conditioned on text-side
//! embeddings, built from residual dense blocks with AdaLN modulation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dit::sinusoidal_batch;
use crate::edm::{ode_sample, EdmDenoiser, EdmParams};
use crate::embedding::{l2_normalize, EmbeddingSet};
use crate::error::{ensure, Error, Result};
use crate::net::Network;
use crate::params::{Init, LinearIdx, ParamStore, SpecBuilder};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeConfig {
    pub embed_dim: usize,
    pub hidden_units: usize,
    pub num_blocks: usize,
    pub cond_dropout: f64,
}

impl BridgeConfig {
    pub fn paper_reference() -> Self {
        Self { embed_dim: 512, hidden_units: 1024, num_blocks: 8, cond_dropout: 0.1 }
    }

    pub fn desk() -> Self {
        Self { embed_dim: 64, hidden_units: 256, num_blocks: 8, cond_dropout: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.embed_dim > 0 && self.num_blocks > 0, || "bridge dims must be positive".into())?;
        ensure(self.hidden_units > 0 && self.hidden_units.is_multiple_of(2), || "hidden_units must be even".into())?;
        ensure((0.0..=1.0).contains(&self.cond_dropout), || "cond_dropout must be a probability".into())
    }

    /// Unit-norm embeddings are multiplied by this before diffusion so that
    /// coordinates have roughly `sigma_data` spread.
    pub fn data_scale(&self, edm: &EdmParams) -> f64 {
        (self.embed_dim as f64).sqrt() * edm.sigma_data
    }
}

/// Batched text-side conditioning; `drop[i]` selects the null embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TextCond<T> {
    /// `[batch, embed_dim]`
    pub text: Option<Tensor<T>>,
    pub drop: Vec<bool>,
}

impl<T: Scalar> TextCond<T> {
    pub fn unconditional(batch: usize) -> Self {
        Self { text: None, drop: vec![true; batch] }
    }

    pub fn new(text: Tensor<T>) -> Result<Self> {
        ensure(text.shape().len() == 2, || format!("text conditioning {:?} must be [batch, dim]", text.shape()))?;
        let b = text.shape()[0];
        Ok(Self { text: Some(text), drop: vec![false; b] })
    }

    pub fn batch(&self) -> usize {
        self.drop.len()
    }

    pub fn apply_dropout<R: Rng + ?Sized>(&mut self, p: f64, rng: &mut R) {
        for d in &mut self.drop {
            if rng.random::<f64>() < p {
                *d = true;
            }
        }
    }

    pub fn repeat(&self, n: usize) -> Result<Self> {
        ensure(self.batch() == 1, || "repeat expects a single-example batch".into())?;
        Ok(Self {
            text: self.text.as_ref().map(|t| Tensor::concat_batch(&vec![t; n])).transpose()?,
            drop: vec![self.drop[0]; n],
        })
    }
}

#[derive(Clone, Debug)]
struct BlockIdx {
    ada: LinearIdx,
    fc1: LinearIdx,
    fc2: LinearIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    in_proj: LinearIdx,
    t_mlp1: LinearIdx,
    t_mlp2: LinearIdx,
    text_proj: LinearIdx,
    null_text: usize,
    blocks: Vec<BlockIdx>,
    out: LinearIdx,
}

#[derive(Clone, Debug)]
pub struct Bridge<T> {
    config: BridgeConfig,
    layout: Layout,
    store: ParamStore<T>,
}

impl<T: Scalar> Bridge<T> {
    pub fn new(config: BridgeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (e, h) = (config.embed_dim, config.hidden_units);
        let mut b = SpecBuilder::new();
        let in_proj = b.linear("in_proj", e, h);
        let t_mlp1 = b.linear("noise_mlp.0", h, h);
        let t_mlp2 = b.linear("noise_mlp.1", h, h);
        let text_proj = b.linear("text_proj", e, h);
        let null_text = b.tensor("null_text", &[e], Init::Normal(1.0 / (e as f64).sqrt()));
        let blocks = (0..config.num_blocks)
            .map(|i| BlockIdx {
                ada: b.zero_linear(&format!("blocks.{i}.ada"), h, 3 * h),
                fc1: b.linear(&format!("blocks.{i}.fc1"), h, h),
                fc2: b.linear(&format!("blocks.{i}.fc2"), h, h),
            })
            .collect();
        let out = b.zero_linear("out", h, e);
        let layout = Layout { in_proj, t_mlp1, t_mlp2, text_proj, null_text, blocks, out };
        let store = ParamStore::initialize(&b.finish(), seed);
        Ok(Self { config, layout, store })
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.config
    }

    pub fn cast<U: Scalar>(&self) -> Bridge<U> {
        Bridge { config: self.config.clone(), layout: self.layout.clone(), store: self.store.cast() }
    }

    fn lin(tape: &mut Tape<T>, p: &[Var], x: Var, l: LinearIdx) -> Result<Var> {
        tape.linear(x, p[l.w], Some(p[l.b]))
    }
}

impl<T: Scalar> Network<T> for Bridge<T> {
    type Cond = TextCond<T>;

    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn forward_tape(&self, tape: &mut Tape<T>, p: &[Var], x_in: Var, c_noise: &[T], cond: &TextCond<T>) -> Result<Var> {
        let (e, h) = (self.config.embed_dim, self.config.hidden_units);
        let shape = tape.shape(x_in).to_vec();
        ensure(shape.len() == 2 && shape[1] == e, || format!("bridge input {shape:?}, expected [batch, {e}]"))?;
        let b = shape[0];
        ensure(c_noise.len() == b && cond.batch() == b, || "batch size disagrees across inputs".into())?;
        let l = &self.layout;

        let sin = tape.constant(&Tensor::new(vec![b, h], sinusoidal_batch(c_noise, h)?)?);
        let t = Self::lin(tape, p, sin, l.t_mlp1)?;
        let t = tape.silu(t);
        let t = Self::lin(tape, p, t, l.t_mlp2)?;
        let (text, mask) = match &cond.text {
            Some(tx) => {
                ensure(tx.shape() == [b, e], || format!("text embedding {:?}, expected [{b}, {e}]", tx.shape()))?;
                (tape.constant(&tx.scale(T::of((e as f64).sqrt()))), cond.drop.clone())
            }
            None => (tape.constant(&Tensor::zeros(&[b, e])), vec![true; b]),
        };
        let text = tape.replace_groups(text, p[l.null_text], mask)?;
        let text = Self::lin(tape, p, text, l.text_proj)?;
        let c = tape.add(t, text)?;
        let c = tape.silu(c);

        let mut x = Self::lin(tape, p, x_in, l.in_proj)?;
        for (i, blk) in l.blocks.iter().enumerate() {
            let mods = Self::lin(tape, p, c, blk.ada)?;
            let shift = tape.slice_cols(mods, 0, h)?;
            let scale = tape.slice_cols(mods, h, h)?;
            let gate = tape.slice_cols(mods, 2 * h, h)?;
            let n = tape.layer_norm(x, T::of(LN_EPS));
            let m = tape.mul(n, scale)?;
            let m = tape.add(n, m)?;
            let m = tape.add(m, shift)?;
            let f = Self::lin(tape, p, m, blk.fc1)?;
            let f = tape.silu(f);
            let f = Self::lin(tape, p, f, blk.fc2)?;
            let f = tape.mul(f, gate)?;
            x = tape.add(x, f)?;
            if !tape.is_finite(x) {
                return Err(Error::Divergence(format!("non-finite activations after bridge block {i}")));
            }
        }
        let n = tape.layer_norm(x, T::of(LN_EPS));
        Self::lin(tape, p, n, l.out)
    }

    fn with_null_half(&self, cond: &TextCond<T>) -> Result<TextCond<T>> {
        let text = cond.text.as_ref().map(|t| Tensor::concat_batch(&[t, t])).transpose()?;
        let mut drop = cond.drop.clone();
        drop.extend(std::iter::repeat_n(true, cond.batch()));
        Ok(TextCond { text, drop })
    }
}

/// Draws one audio-side embedding per conditioning row with the Heun sampler,
/// then maps each back to the unit sphere.
pub fn bridge_sample<T: Scalar, R: Rng + ?Sized>(
    bridge: &Bridge<T>,
    cond: &TextCond<T>,
    num_steps: usize,
    guidance: T,
    edm: &EdmParams,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let b = cond.batch();
    let den = EdmDenoiser::new(bridge, cond.clone(), edm, guidance);
    let mut out = ode_sample(&den, &[b, bridge.config.embed_dim], num_steps, edm, rng)?;
    let e = bridge.config.embed_dim;
    for row in out.data_mut().chunks_mut(e) {
        l2_normalize(row)?;
    }
    Ok(out)
}

/// Distance between set centroids and mean cosine over matched rows.
pub fn modality_gap_stats<T: Scalar>(text: &EmbeddingSet<T>, audio: &EmbeddingSet<T>) -> Result<(T, T)> {
    ensure(text.dim() == audio.dim(), || format!("dimension {} vs {}", text.dim(), audio.dim()))?;
    let (mt, ma) = (text.mean(), audio.mean());
    let dist = mt.iter().zip(&ma).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt();
    let n = text.len().min(audio.len());
    let mut cos = T::zero();
    for i in 0..n {
        cos = cos + crate::metrics::cosine_score(text.row(i), audio.row(i))?;
    }
    Ok((dist, cos / T::of(n as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BridgeConfig {
        BridgeConfig { embed_dim: 8, hidden_units: 16, num_blocks: 2, cond_dropout: 0.1 }
    }

    #[test]
    fn zero_output_at_init() {
        let br = Bridge::<f64>::new(tiny(), 1).unwrap();
        let x = Tensor::full(&[3, 8], 0.7);
        let out = br.forward(&x, &[0.1, -0.3, 1.0], &TextCond::unconditional(3)).unwrap();
        assert_eq!(out.shape(), &[3, 8]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forced_drop_matches_unconditional() {
        use rand::SeedableRng;
        let mut br = Bridge::<f64>::new(tiny(), 2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        br.store_mut().randomize(0.3, &mut rng);
        let x = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let mut cond = TextCond::new(Tensor::randn(&[2, 8], 1.0, &mut rng)).unwrap();
        cond.apply_dropout(1.0, &mut rng);
        let a = br.forward(&x, &[0.0, 0.2], &cond).unwrap();
        let b = br.forward(&x, &[0.0, 0.2], &TextCond::unconditional(2)).unwrap();
        assert_eq!(a, b);
    }
}

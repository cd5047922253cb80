//! Latent sequences and their token view.

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A `(length x channels)` array of latent frames.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence<T> {
    frames: Tensor<T>,
}

impl<T: Scalar> LatentSequence<T> {
    pub fn new(frames: Tensor<T>) -> Result<Self> {
        ensure(frames.shape().len() == 2, || format!("latent frames must be 2-D, got {:?}", frames.shape()))?;
        frames.check_finite("latent sequence")?;
        Ok(Self { frames })
    }

    pub fn from_fn(len: usize, channels: usize, f: impl Fn(usize, usize) -> T) -> Self {
        let data = (0..len * channels).map(|i| f(i / channels, i % channels)).collect();
        Self { frames: Tensor::new(vec![len, channels], data).expect("positive extents") }
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frames(&self) -> &Tensor<T> {
        &self.frames
    }

    pub fn get(&self, t: usize, c: usize) -> T {
        self.frames.data()[t * self.channels() + c]
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        ensure(start + len <= self.len() && len > 0, || format!("window {start}+{len} of {}", self.len()))?;
        let c = self.channels();
        let data = self.frames.data()[start * c..(start + len) * c].to_vec();
        Ok(Self { frames: Tensor::new(vec![len, c], data)? })
    }

    /// Stacks equal-shaped sequences into a `[batch, len, channels]` tensor.
    pub fn stack(items: &[Self]) -> Result<Tensor<T>> {
        ensure(!items.is_empty(), || "cannot stack zero sequences".into())?;
        let shape = items[0].frames.shape().to_vec();
        let mut data = Vec::with_capacity(items.len() * items[0].frames.numel());
        for s in items {
            ensure(s.frames.shape() == shape.as_slice(), || "stacked sequences differ in shape".into())?;
            data.extend_from_slice(s.frames.data());
        }
        Tensor::new(vec![items.len(), shape[0], shape[1]], data)
    }

    /// Splits a `[batch, len, channels]` tensor into sequences.
    pub fn unstack(batch: &Tensor<T>) -> Result<Vec<Self>> {
        let s = batch.shape();
        ensure(s.len() == 3, || format!("expected [batch, len, channels], got {s:?}"))?;
        (0..s[0]).map(|i| Self::new(Tensor::new(vec![s[1], s[2]], batch.item(i).to_vec())?)).collect()
    }
}

/// Token view of a latent sequence: `[tokens, patch * channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokens<T> {
    pub data: Tensor<T>,
    pub original_len: usize,
    pub patch_size: usize,
    pub channels: usize,
}

pub fn token_count(len: usize, patch_size: usize) -> usize {
    len.div_ceil(patch_size)
}

/// Groups `patch_size` consecutive frames per token, zero-padding the tail.
pub fn patchify<T: Scalar>(seq: &LatentSequence<T>, patch_size: usize) -> Result<Tokens<T>> {
    ensure(patch_size > 0, || "patch size must be positive".into())?;
    let (len, c) = (seq.len(), seq.channels());
    let n = token_count(len, patch_size);
    let mut data = seq.frames.data().to_vec();
    data.resize(n * patch_size * c, T::zero());
    Ok(Tokens { data: Tensor::new(vec![n, patch_size * c], data)?, original_len: len, patch_size, channels: c })
}

/// Inverse of [`patchify`]; strips the padding.
pub fn unpatchify<T: Scalar>(tokens: &Tokens<T>) -> Result<LatentSequence<T>> {
    let s = tokens.data.shape();
    let expect = token_count(tokens.original_len, tokens.patch_size);
    if s.len() != 2 || s[0] != expect || s[1] != tokens.patch_size * tokens.channels {
        return Err(Error::Corruption(format!(
            "token tensor {s:?} inconsistent with length {} / patch {} / channels {}",
            tokens.original_len, tokens.patch_size, tokens.channels
        )));
    }
    let data = tokens.data.data()[..tokens.original_len * tokens.channels].to_vec();
    LatentSequence::new(Tensor::new(vec![tokens.original_len, tokens.channels], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(len: usize, c: usize) -> LatentSequence<f64> {
        LatentSequence::from_fn(len, c, |t, k| (t * 7 + k) as f64 * 0.5 - 3.0)
    }

    #[test]
    fn exact_multiple() {
        let s = seq(16, 3);
        let t = patchify(&s, 4).unwrap();
        assert_eq!(t.data.shape(), &[4, 12]);
        assert_eq!(unpatchify(&t).unwrap(), s);
    }

    #[test]
    fn padded_tail() {
        let s = seq(15, 2);
        let t = patchify(&s, 4).unwrap();
        assert_eq!(t.data.shape(), &[4, 8]);
        assert_eq!(&t.data.data()[30..], &[0.0, 0.0]);
        let back = unpatchify(&t).unwrap();
        assert_eq!(back.len(), 15);
        assert_eq!(back, s);
    }

    #[test]
    fn patch_one_tokens_are_frames() {
        let s = seq(5, 3);
        let t = patchify(&s, 1).unwrap();
        assert_eq!(t.data.shape()[0], 5);
        assert_eq!(t.data.data(), s.frames().data());
    }

    #[test]
    fn inconsistent_tokens_are_corruption() {
        let mut t = patchify(&seq(8, 2), 2).unwrap();
        t.original_len = 11;
        assert!(matches!(unpatchify(&t), Err(Error::Corruption(_))));
    }

    proptest! {
        #[test]
        fn round_trip_all_lengths(len in 1usize..=64, patch in 1usize..=8, c in 1usize..4) {
            let s = seq(len, c);
            let t = patchify(&s, patch).unwrap();
            prop_assert_eq!(t.data.shape()[0], len.div_ceil(patch));
            prop_assert_eq!(unpatchify(&t).unwrap(), s);
        }
    }
}

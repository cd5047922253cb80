use rand::Rng;

use super::patch::LatentSequence;
use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which conditioning fields were dropped for classifier-free training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Dropped {
    pub context: bool,
    pub style: bool,
}

/// Conditioning for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle<T> {
    pub context: Option<LatentSequence<T>>,
    pub style_embedding: Option<Vec<T>>,
    pub dropped: Dropped,
}

impl<T: Scalar> ConditioningBundle<T> {
    pub fn unconditional() -> Self {
        Self { context: None, style_embedding: None, dropped: Dropped { context: true, style: true } }
    }
}

/// Batched conditioning. A field that is absent is treated as dropped for
/// every example; the network substitutes its learned null token.
#[derive(Clone, Debug, PartialEq)]
pub struct CondBatch<T> {
    /// `[batch, len, context_channels]`
    pub context: Option<Tensor<T>>,
    /// `[batch, style_dim]`
    pub style: Option<Tensor<T>>,
    pub drop_context: Vec<bool>,
    pub drop_style: Vec<bool>,
}

impl<T: Scalar> CondBatch<T> {
    pub fn unconditional(batch: usize) -> Self {
        Self { context: None, style: None, drop_context: vec![true; batch], drop_style: vec![true; batch] }
    }

    pub fn batch(&self) -> usize {
        self.drop_context.len()
    }

    pub fn new(context: Option<Tensor<T>>, style: Option<Tensor<T>>, batch: usize) -> Result<Self> {
        if let Some(c) = &context {
            ensure(c.shape().len() == 3 && c.shape()[0] == batch, || format!("context {:?} for batch {batch}", c.shape()))?;
        }
        if let Some(s) = &style {
            ensure(s.shape().len() == 2 && s.shape()[0] == batch, || format!("style {:?} for batch {batch}", s.shape()))?;
        }
        Ok(Self {
            drop_context: vec![context.is_none(); batch],
            drop_style: vec![style.is_none(); batch],
            context,
            style,
        })
    }

    /// Batches per-example bundles; missing fields are zero-filled and marked dropped.
    pub fn from_bundles(bundles: &[ConditioningBundle<T>], context_shape: (usize, usize), style_dim: usize) -> Result<Self> {
        let b = bundles.len();
        ensure(b > 0, || "empty conditioning batch".into())?;
        let any_ctx = bundles.iter().any(|x| x.context.is_some());
        let any_style = bundles.iter().any(|x| x.style_embedding.is_some());
        let context = if any_ctx {
            let (len, ch) = context_shape;
            let mut data = Vec::with_capacity(b * len * ch);
            for x in bundles {
                match &x.context {
                    Some(c) => {
                        ensure(c.len() == len && c.channels() == ch, || "context shape differs within batch".into())?;
                        data.extend_from_slice(c.frames().data());
                    }
                    None => data.extend(std::iter::repeat_n(T::zero(), len * ch)),
                }
            }
            Some(Tensor::new(vec![b, len, ch], data)?)
        } else {
            None
        };
        let style = if any_style {
            let mut data = Vec::with_capacity(b * style_dim);
            for x in bundles {
                match &x.style_embedding {
                    Some(s) => {
                        ensure(s.len() == style_dim, || format!("style embedding of {} values, expected {style_dim}", s.len()))?;
                        data.extend_from_slice(s);
                    }
                    None => data.extend(std::iter::repeat_n(T::zero(), style_dim)),
                }
            }
            Some(Tensor::new(vec![b, style_dim], data)?)
        } else {
            None
        };
        Ok(Self {
            context,
            style,
            drop_context: bundles.iter().map(|x| x.dropped.context || x.context.is_none()).collect(),
            drop_style: bundles.iter().map(|x| x.dropped.style || x.style_embedding.is_none()).collect(),
        })
    }

    /// Independently drops each present field with probability `p`.
    pub fn apply_dropout<R: Rng + ?Sized>(&mut self, p: f64, rng: &mut R) {
        for d in self.drop_context.iter_mut().chain(self.drop_style.iter_mut()) {
            if rng.random::<f64>() < p {
                *d = true;
            }
        }
    }

    /// Concatenates `self` with a copy whose fields are all dropped.
    pub fn with_null_half(&self) -> Result<Self> {
        let dup = |t: &Option<Tensor<T>>| -> Result<Option<Tensor<T>>> {
            t.as_ref().map(|t| Tensor::concat_batch(&[t, t])).transpose()
        };
        let b = self.batch();
        let mut drop_context = self.drop_context.clone();
        drop_context.extend(std::iter::repeat_n(true, b));
        let mut drop_style = self.drop_style.clone();
        drop_style.extend(std::iter::repeat_n(true, b));
        Ok(Self { context: dup(&self.context)?, style: dup(&self.style)?, drop_context, drop_style })
    }

    /// Rows `[start, start + len)` of every field.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let part = |t: &Option<Tensor<T>>| t.as_ref().map(|t| t.slice_batch(start, len)).transpose();
        Ok(Self {
            context: part(&self.context)?,
            style: part(&self.style)?,
            drop_context: self.drop_context[start..start + len].to_vec(),
            drop_style: self.drop_style[start..start + len].to_vec(),
        })
    }

    /// Same conditioning repeated for `n` examples (from a single-example batch).
    pub fn repeat(&self, n: usize) -> Result<Self> {
        ensure(self.batch() == 1, || "repeat expects a single-example batch".into())?;
        let rep = |t: &Option<Tensor<T>>| -> Result<Option<Tensor<T>>> {
            t.as_ref().map(|t| Tensor::concat_batch(&vec![t; n])).transpose()
        };
        Ok(Self {
            context: rep(&self.context)?,
            style: rep(&self.style)?,
            drop_context: vec![self.drop_context[0]; n],
            drop_style: vec![self.drop_style[0]; n],
        })
    }
}

use crate::error::{ensure, Result};
use crate::scalar::Scalar;

/// Interleaved `[sin(v w_0), cos(v w_0), sin(v w_1), ...]` with frequencies
/// `w_i = 10000^(-i / (dim / 2))`.
pub fn sinusoidal_embed<T: Scalar>(value: T, dim: usize) -> Result<Vec<T>> {
    ensure(dim > 0 && dim.is_multiple_of(2), || format!("sinusoidal embedding dim {dim} must be even and positive"))?;
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = T::of(10000f64.powf(-(i as f64) / half as f64));
        let (s, c) = (value * freq).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

/// Embeddings of a batch of values, row-major `[values.len(), dim]`.
pub fn sinusoidal_batch<T: Scalar>(values: &[T], dim: usize) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(values.len() * dim);
    for &v in values {
        out.extend(sinusoidal_embed(v, dim)?);
    }
    Ok(out)
}

//! Dense row-major tensors.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array. `shape` has only positive extents and its product
/// always equals `data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        ensure(!shape.is_empty() && shape.iter().all(|&d| d > 0), || {
            format!("tensor shape {shape:?} must have positive extents")
        })?;
        let numel: usize = shape.iter().product();
        ensure(numel == data.len(), || {
            format!("shape {shape:?} holds {numel} values, got {}", data.len())
        })?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel]).expect("valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    /// Standard normal draws scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: T, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let n: f64 = rng.sample(StandardNormal);
                T::of(n) * std
            })
            .collect();
        Self::new(shape.to_vec(), data).expect("valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure(numel == self.data.len() && shape.iter().all(|&d| d > 0), || {
            format!("cannot reshape {:?} into {shape:?}", self.shape)
        })?;
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        ensure(self.shape == other.shape, || {
            format!("shape mismatch: {:?} vs {:?}", self.shape, other.shape)
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with a divergence report naming `what` if any value is NaN/Inf.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Divergence(format!("non-finite value in {what} at flat index {i}"))),
        }
    }

    /// Contiguous slab belonging to batch element `i`.
    pub fn item(&self, i: usize) -> &[T] {
        let chunk = self.data.len() / self.shape[0];
        &self.data[i * chunk..(i + 1) * chunk]
    }

    /// Concatenates along the leading dimension.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        ensure(!parts.is_empty(), || "concat of zero tensors".into())?;
        let tail = &parts[0].shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            ensure(&p.shape[1..] == tail, || {
                format!("cannot concat {:?} with {:?}", parts[0].shape, p.shape)
            })?;
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Self::new(shape, data)
    }

    /// Rows `[start, start + len)` along the leading dimension.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Self> {
        ensure(start + len <= self.shape[0] && len > 0, || {
            format!("batch slice {start}..{} out of {}", start + len, self.shape[0])
        })?;
        let chunk = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self::new(shape, self.data[start * chunk..(start + len) * chunk].to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
        }
    }
}

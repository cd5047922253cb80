//! Named parameter collections and their declarative layouts.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How a parameter is filled at construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    FanIn(usize),
    Normal(f64),
    /// Depthwise kernel `[channels, width]` with a 1 in the centre tap.
    Delta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Indices of a dense layer's weight `[in, out]` and bias `[out]`.
#[derive(Clone, Copy, Debug)]
pub struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

/// Accumulates parameter declarations while a model layout is built.
#[derive(Default)]
pub struct SpecBuilder {
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensor(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec { name: name.into(), shape: shape.to_vec(), init });
        self.specs.len() - 1
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIdx {
        LinearIdx {
            w: self.tensor(format!("{name}.w"), &[fan_in, fan_out], Init::FanIn(fan_in)),
            b: self.tensor(format!("{name}.b"), &[fan_out], Init::Zeros),
        }
    }

    pub fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIdx {
        LinearIdx {
            w: self.tensor(format!("{name}.w"), &[fan_in, fan_out], Init::Zeros),
            b: self.tensor(format!("{name}.b"), &[fan_out], Init::Zeros),
        }
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Total scalar count of a layout, computed without allocating any weights.
pub fn count_params(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    /// Allocates and initializes every declared parameter from `seed`.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() };
        for spec in specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::FanIn(n) => Tensor::randn(&spec.shape, T::of(1.0 / (n.max(1) as f64).sqrt()), &mut rng),
                Init::Normal(std) => Tensor::randn(&spec.shape, T::of(std), &mut rng),
                Init::Delta => {
                    let mut t = Tensor::zeros(&spec.shape);
                    let k = spec.shape[1];
                    for c in 0..spec.shape[0] {
                        t.data_mut()[c * k + k / 2] = T::one();
                    }
                    t
                }
            };
            store.push(spec.name.clone(), t);
        }
        store
    }

    fn push(&mut self, name: String, t: Tensor<T>) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Records every parameter as a tape leaf, in store order.
    pub fn load(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t, requires_grad)).collect()
    }

    /// Overwrites values from `(name, tensor)` pairs; every parameter must be
    /// present with its declared shape.
    pub fn assign_from(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in entries {
            let Some(i) = self.find(name) else { continue };
            ensure(t.shape() == self.tensors[i].shape(), || {
                format!("parameter {name}: stored shape {:?}, expected {:?}", t.shape(), self.tensors[i].shape())
            })?;
            self.tensors[i] = t.clone();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Corruption(format!("checkpoint is missing parameter {}", self.names[i])));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Flat view of all values, store order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Adds `delta` to the flat coordinate `i`.
    pub fn perturb(&mut self, mut i: usize, delta: T) {
        for t in &mut self.tensors {
            if i < t.numel() {
                t.data_mut()[i] = t.data()[i] + delta;
                return;
            }
            i -= t.numel();
        }
        panic!("flat parameter index out of range");
    }

    /// Fills every parameter with small random values, replacing zero inits.
    /// Used to move models away from their identity initialization in tests.
    pub fn randomize<R: Rng>(&mut self, std: T, rng: &mut R) {
        for t in &mut self.tensors {
            let noise = Tensor::randn(t.shape(), std, rng);
            *t = t.add(&noise).expect("same shape");
        }
    }
}

//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learning-rate schedule plus the AdamW hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Optional global gradient-norm clip; off unless configured.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl TrainSchedule {
    /// Paper-default hyper-parameters for a run of `total_steps`.
    pub fn new(total_steps: usize) -> Self {
        Self {
            base_lr: 1e-4,
            warmup_steps: 1000,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            eps: 1e-8,
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.base_lr > 0.0, || "base_lr must be positive".into())?;
        ensure(self.warmup_steps > 0 && self.warmup_steps < self.total_steps, || {
            format!("need 0 < warmup_steps ({}) < total_steps ({})", self.warmup_steps, self.total_steps)
        })?;
        ensure(self.weight_decay >= 0.0 && self.eps > 0.0, || "weight_decay >= 0 and eps > 0".into())?;
        ensure((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), || "betas in [0, 1)".into())
    }
}

static CLAMP_LOGGED: AtomicBool = AtomicBool::new(false);

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0 at `total_steps`.
pub fn lr_at(schedule: &TrainSchedule, step: usize) -> f64 {
    let TrainSchedule { base_lr, warmup_steps, total_steps, .. } = *schedule;
    if step > total_steps {
        if !CLAMP_LOGGED.swap(true, Ordering::Relaxed) {
            log::warn!("lr requested at step {step} beyond total_steps {total_steps}; clamped to 0");
        }
        return 0.0;
    }
    if step <= warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn for_param(p: &Tensor<T>) -> Self {
        Self { first_moment: Tensor::zeros(p.shape()), second_moment: Tensor::zeros(p.shape()), step_count: 0 }
    }
}

/// One AdamW update of `params` at learning rate `lr_at(schedule, step)`.
pub fn adamw_step<T: Scalar>(
    params: &mut Tensor<T>,
    grads: &Tensor<T>,
    state: &mut OptimizerState<T>,
    schedule: &TrainSchedule,
    step: usize,
) -> Result<()> {
    params.same_shape(grads)?;
    params.same_shape(&state.first_moment)?;
    params.same_shape(&state.second_moment)?;
    if let Some(i) = grads.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!("non-finite gradient at index {i} (step {step})")));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let lr = T::of(lr_at(schedule, step));
    let (b1, b2) = (T::of(schedule.beta1), T::of(schedule.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let decay = T::one() - lr * T::of(schedule.weight_decay);
    let eps = T::of(schedule.eps);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (i, (p, &g)) in params.data_mut().iter_mut().zip(grads.data()).enumerate() {
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        *p = *p * decay - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// AdamW over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub schedule: TrainSchedule,
    pub states: Vec<OptimizerState<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, schedule: TrainSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self { schedule, states: store.tensors().iter().map(OptimizerState::for_param).collect() })
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |s| s.step_count)
    }

    /// Applies one update; `grads` holds one flat gradient per parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, mut grads: Vec<Vec<T>>) -> Result<()> {
        ensure(grads.len() == store.len() && self.states.len() == store.len(), || "gradient count mismatch".into())?;
        if let Some(max_norm) = self.schedule.clip_norm {
            let norm = grads.iter().flatten().map(|&g| g * g).sum::<T>().sqrt();
            let max_norm = T::of(max_norm);
            if norm > max_norm {
                let s = max_norm / norm;
                grads.iter_mut().flatten().for_each(|g| *g = *g * s);
            }
        }
        let step = self.steps_taken() as usize + 1;
        for (i, g) in grads.into_iter().enumerate() {
            let shape = store.get(i).shape().to_vec();
            let g = Tensor::new(shape, g)?;
            adamw_step(store.get_mut(i), &g, &mut self.states[i], &self.schedule, step)?;
        }
        Ok(())
    }
}

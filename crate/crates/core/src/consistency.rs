//! Consistency training on continuous noise levels and few-step sampling.

use std::cell::Cell;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::edm::{per_example, precondition, sigma_ladder, EdmParams};
use crate::error::{ensure, Error, Result};
use crate::net::Network;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Exponentially annealed gap between adjacent noise levels, in log-sigma units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencySchedule {
    pub gap_max: f64,
    pub gap_min: f64,
    pub total_steps: usize,
}

impl ConsistencySchedule {
    pub fn new(total_steps: usize) -> Self {
        Self { gap_max: 2.0, gap_min: 1e-4, total_steps }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.gap_min > 0.0 && self.gap_min < self.gap_max, || {
            format!("need 0 < gap_min ({}) < gap_max ({})", self.gap_min, self.gap_max)
        })?;
        ensure(self.total_steps > 0, || "total_steps must be positive".into())
    }
}

/// `gap_max * (gap_min / gap_max)^(k / total_steps)`; `k` is clamped to the run length.
pub fn gap_at(schedule: &ConsistencySchedule, k: usize) -> f64 {
    let t = k.min(schedule.total_steps) as f64 / schedule.total_steps as f64;
    schedule.gap_max * (schedule.gap_min / schedule.gap_max).powf(t)
}

/// Pseudo-Huber scale for data of `dim` values.
pub fn huber_c(dim: usize) -> f64 {
    0.00054 * (dim as f64).sqrt()
}

/// `sqrt(|a - b|² + c²) - c`.
pub fn pseudo_huber<T: Scalar>(a: &[T], b: &[T], c: T) -> T {
    let sq: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    (sq + c * c).sqrt() - c
}

/// `(c_skip, c_out)` shifted so that the consistency function is the identity
/// at `sigma_min`.
pub fn boundary_coefficients<T: Scalar>(sigma: T, params: &EdmParams) -> Result<(T, T)> {
    let smin = T::of(params.sigma_min);
    ensure(sigma >= smin, || format!("sigma {sigma} below sigma_min {}", params.sigma_min))?;
    let sd = T::of(params.sigma_data);
    let off = sigma - smin;
    Ok((sd * sd / (off * off + sd * sd), sd * off / (sigma * sigma + sd * sd).sqrt()))
}

/// `c_skip(σ) x + c_out(σ) F` with boundary-shifted coefficients.
pub fn consistency_fn<T: Scalar>(raw: &Tensor<T>, noisy: &Tensor<T>, sigma: T, params: &EdmParams) -> Result<Tensor<T>> {
    let (cs, co) = boundary_coefficients(sigma, params)?;
    if co == T::zero() {
        raw.same_shape(noisy)?;
        return Ok(noisy.clone());
    }
    noisy.zip_map(raw, |x, f| cs * x + co * f)
}

/// Network plus fixed conditioning, evaluated as a consistency function and
/// counting network evaluations.
pub struct ConsistencyModel<'a, T: Scalar, N: Network<T>> {
    pub net: &'a N,
    pub cond: N::Cond,
    pub params: &'a EdmParams,
    calls: Cell<usize>,
}

impl<'a, T: Scalar, N: Network<T>> ConsistencyModel<'a, T, N> {
    pub fn new(net: &'a N, cond: N::Cond, params: &'a EdmParams) -> Self {
        Self { net, cond, params, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    /// `f(x, σ)` for a batch at a shared noise level.
    pub fn apply(&self, x: &Tensor<T>, sigma: T) -> Result<Tensor<T>> {
        self.calls.set(self.calls.get() + 1);
        let pc = precondition(sigma, self.params)?;
        let raw = self.net.forward(&x.scale(pc.c_in), &vec![pc.c_noise; x.batch()], &self.cond)?;
        consistency_fn(&raw, x, sigma, self.params)
    }
}

/// One network evaluation from `z ~ N(0, σ_max² I)`.
pub fn one_step_sample<T: Scalar, N: Network<T>, R: Rng + ?Sized>(
    model: &ConsistencyModel<'_, T, N>,
    shape: &[usize],
    rng: &mut R,
) -> Result<Tensor<T>> {
    multistep_sample(model, shape, 1, rng)
}

/// `num_steps` consistency applications down `sigma_ladder(num_steps + 1)`,
/// re-noising with fresh noise between them.
pub fn multistep_sample<T: Scalar, N: Network<T>, R: Rng + ?Sized>(
    model: &ConsistencyModel<'_, T, N>,
    shape: &[usize],
    num_steps: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    multistep_trace(model, shape, num_steps, rng).map(|mut v| v.pop().expect("at least one step"))
}

/// Like [`multistep_sample`] but returns the clean estimate after every step.
pub fn multistep_trace<T: Scalar, N: Network<T>, R: Rng + ?Sized>(
    model: &ConsistencyModel<'_, T, N>,
    shape: &[usize],
    num_steps: usize,
    rng: &mut R,
) -> Result<Vec<Tensor<T>>> {
    ensure(num_steps >= 1, || "consistency sampling needs at least one step".into())?;
    let p = model.params;
    let ladder = sigma_ladder(num_steps + 1, p)?;
    let mut x = Tensor::randn(shape, T::of(p.sigma_max), rng);
    let mut trace = Vec::with_capacity(num_steps);
    for j in 0..num_steps {
        let est = model.apply(&x, T::of(ladder[j]))?;
        if !est.is_finite() {
            return Err(Error::Divergence(format!("non-finite consistency estimate at step {j}")));
        }
        if j + 1 < num_steps {
            let std = T::of((ladder[j + 1].powi(2) - p.sigma_min.powi(2)).max(0.0).sqrt());
            let n = Tensor::randn(shape, std, rng);
            x = est.add(&n)?;
        }
        trace.push(est);
    }
    Ok(trace)
}

/// Noise levels `σ_{i+1} > σ_i` and the shared unit noise for one batch.
#[derive(Clone, Debug)]
pub struct ConsistencyDraw<T> {
    pub sigma_hi: Vec<T>,
    pub sigma_lo: Vec<T>,
    pub noise: Tensor<T>,
}

impl<T: Scalar> ConsistencyDraw<T> {
    pub fn sample<R: Rng + ?Sized>(shape: &[usize], gap: f64, params: &EdmParams, rng: &mut R) -> Self {
        let lo_bound = (params.sigma_min * gap.exp()).min(params.sigma_max);
        let mut hi = Vec::with_capacity(shape[0]);
        let mut lo = Vec::with_capacity(shape[0]);
        for _ in 0..shape[0] {
            let n: f64 = rng.sample(StandardNormal);
            let s = (params.p_mean + params.p_std * n).exp().clamp(lo_bound, params.sigma_max);
            let mut l = s * (-gap).exp();
            if l < params.sigma_min {
                log::debug!("lower noise level {l} fell below sigma_min; clamped");
                l = params.sigma_min;
            }
            hi.push(T::of(s));
            lo.push(T::of(l));
        }
        Self { sigma_hi: hi, sigma_lo: lo, noise: Tensor::randn(shape, T::one(), rng) }
    }
}

/// Frozen copy of the student that only ever supplies targets.
#[derive(Clone, Debug)]
pub struct TeacherState<T> {
    pub store: ParamStore<T>,
}

impl<T: Scalar> TeacherState<T> {
    pub fn snapshot(student: &ParamStore<T>) -> Self {
        Self { store: student.clone() }
    }

    pub fn refresh(&mut self, student: &ParamStore<T>) {
        self.store.clone_from(student);
    }

    /// Leaves for the teacher on `tape`; they never require gradients.
    pub fn load(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.store.load(tape, false)
    }
}

fn consistency_tape<T: Scalar, N: Network<T>>(
    net: &N,
    tape: &mut Tape<T>,
    params: &[Var],
    noisy: &Tensor<T>,
    sigmas: &[T],
    cond: &N::Cond,
    edm: &EdmParams,
) -> Result<Var> {
    let mut c_in = Vec::with_capacity(sigmas.len());
    let mut c_noise = Vec::with_capacity(sigmas.len());
    let mut c_skip = Vec::with_capacity(sigmas.len());
    let mut c_out = Vec::with_capacity(sigmas.len());
    for &s in sigmas {
        let pc = precondition(s, edm)?;
        let (cs, co) = boundary_coefficients(s, edm)?;
        c_in.push(pc.c_in);
        c_noise.push(pc.c_noise);
        c_skip.push(cs);
        c_out.push(co);
    }
    let x_in = tape.constant(&per_example(noisy, noisy, &c_in, |x, _, c| x * c)?);
    let f = net.forward_tape(tape, params, x_in, &c_noise, cond)?;
    let f = tape.group_scale(f, c_out)?;
    let skip = tape.constant(&per_example(noisy, noisy, &c_skip, |x, _, c| x * c)?);
    tape.add(f, skip)
}

/// `mean_b λ_b d(f_θ(x_{σ_{i+1}}), f_{θ⁻}(x_{σ_i}))` with pseudo-Huber `d`
/// and `λ = 1 / (σ_{i+1} - σ_i)`. Student leaves receive gradients; teacher
/// leaves are constants.
#[allow(clippy::too_many_arguments)]
pub fn consistency_loss_tape<T: Scalar, N: Network<T>>(
    net: &N,
    tape: &mut Tape<T>,
    student: &[Var],
    teacher: &[Var],
    clean: &Tensor<T>,
    cond: &N::Cond,
    draw: &ConsistencyDraw<T>,
    edm: &EdmParams,
    huber: T,
) -> Result<Var> {
    let b = clean.batch();
    let x_hi = per_example(clean, &draw.noise, &draw.sigma_hi, |c, n, s| c + s * n)?;
    let x_lo = per_example(clean, &draw.noise, &draw.sigma_lo, |c, n, s| c + s * n)?;
    let target = consistency_tape(net, tape, teacher, &x_lo, &draw.sigma_lo, cond, edm)?;
    let out = consistency_tape(net, tape, student, &x_hi, &draw.sigma_hi, cond, edm)?;
    let r = tape.sub(out, target)?;
    let sq = tape.square(r);
    let per = tape.sum_groups(sq, b)?;
    let per = tape.add_scalar(per, huber * huber);
    let per = tape.sqrt(per);
    let per = tape.add_scalar(per, -huber);
    let w: Vec<T> = draw
        .sigma_hi
        .iter()
        .zip(&draw.sigma_lo)
        .map(|(&h, &l)| T::one() / ((h - l) * T::of(b as f64)))
        .collect();
    let per = tape.mul_const(per, w)?;
    let loss = tape.sum(per);
    if !tape.is_finite(loss) {
        return Err(Error::Divergence("non-finite consistency loss".into()));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_is_identity() {
        let p = EdmParams::default();
        let (cs, co) = boundary_coefficients(p.sigma_min, &p).unwrap();
        assert_eq!((cs, co), (1.0, 0.0));
        let raw = Tensor::from_vec(vec![1e6, -3.0]);
        let x = Tensor::from_vec(vec![0.25, 0.5]);
        assert_eq!(consistency_fn(&raw, &x, p.sigma_min, &p).unwrap(), x);
        assert!(consistency_fn(&raw, &x, 0.001, &p).is_err());
        let (cs, _) = boundary_coefficients(p.sigma_max, &p).unwrap();
        let want = 0.25 / ((80.0f64 - 0.002).powi(2) + 0.25);
        assert!((cs - want).abs() < 1e-18 && (cs - 3.9e-5).abs() < 1e-6);
    }

    #[test]
    fn gap_endpoints_and_midpoint() {
        let s = ConsistencySchedule::new(1000);
        assert_eq!(gap_at(&s, 0), 2.0);
        assert!((gap_at(&s, 1000) - 1e-4).abs() < 1e-18);
        assert!((gap_at(&s, 500) - (2.0f64 * 1e-4).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pseudo_huber_regimes() {
        let a = [0.3f64, -1.0];
        assert_eq!(pseudo_huber(&a, &a, 0.01), 0.0);
        let c = 0.01f64;
        let r = c / 100.0;
        let d = pseudo_huber(&[r], &[0.0], c);
        assert!((d - r * r / (2.0 * c)).abs() / d < 1e-4);
    }

    #[test]
    fn draw_respects_gap() {
        use rand::SeedableRng;
        let p = EdmParams::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let d = ConsistencyDraw::<f64>::sample(&[500, 2], 1.5, &p, &mut rng);
        for (&h, &l) in d.sigma_hi.iter().zip(&d.sigma_lo) {
            assert!(l >= p.sigma_min && h > l && h <= p.sigma_max);
            assert!(((h / l).ln() - 1.5).abs() < 1e-9);
        }
    }
}

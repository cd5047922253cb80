//! EDM-style diffusion: preconditioning, training noise levels, the weighted
//! denoising loss, the Karras noise ladder and a deterministic Heun sampler
//! with classifier-free guidance.

use std::cell::Cell;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::net::Network;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdmParams {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    pub rho: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for EdmParams {
    fn default() -> Self {
        Self { sigma_min: 0.002, sigma_max: 80.0, sigma_data: 0.5, rho: 7.0, p_mean: -1.2, p_std: 1.2 }
    }
}

impl EdmParams {
    pub fn validate(&self) -> Result<()> {
        ensure(self.sigma_min > 0.0 && self.rho > 0.0 && self.p_std > 0.0, || "EDM constants must be positive".into())?;
        ensure(self.sigma_min < self.sigma_data && self.sigma_data < self.sigma_max, || {
            format!("need sigma_min < sigma_data < sigma_max, got {} / {} / {}", self.sigma_min, self.sigma_data, self.sigma_max)
        })
    }

    /// Loss weight `(σ² + σ_d²) / (σ σ_d)²`.
    pub fn loss_weight(&self, sigma: f64) -> f64 {
        let sd = self.sigma_data;
        (sigma * sigma + sd * sd) / (sigma * sd).powi(2)
    }
}

/// Preconditioning coefficients at one noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond<T> {
    pub c_skip: T,
    pub c_out: T,
    pub c_in: T,
    pub c_noise: T,
}

pub fn precondition<T: Scalar>(sigma: T, params: &EdmParams) -> Result<Precond<T>> {
    ensure(sigma > T::zero(), || format!("sigma must be positive, got {sigma}"))?;
    let sd = T::of(params.sigma_data);
    let total = sigma * sigma + sd * sd;
    let root = total.sqrt();
    Ok(Precond {
        c_skip: sd * sd / total,
        c_out: sigma * sd / root,
        c_in: T::one() / root,
        c_noise: sigma.ln() / T::of(4.0),
    })
}

/// Log-normal training noise level, clamped to `[sigma_min, sigma_max]`.
pub fn sample_training_sigma<R: Rng + ?Sized>(rng: &mut R, params: &EdmParams) -> f64 {
    let n: f64 = rng.sample(StandardNormal);
    (params.p_mean + params.p_std * n).exp().clamp(params.sigma_min, params.sigma_max)
}

/// Karras ladder of `num_steps` levels from `sigma_max` down to `sigma_min`.
/// A single step yields `[sigma_max]`.
pub fn sigma_ladder(num_steps: usize, params: &EdmParams) -> Result<Vec<f64>> {
    ensure(num_steps >= 1, || "sigma ladder needs at least one step".into())?;
    if num_steps == 1 {
        return Ok(vec![params.sigma_max]);
    }
    let inv = 1.0 / params.rho;
    let (hi, lo) = (params.sigma_max.powf(inv), params.sigma_min.powf(inv));
    let last = (num_steps - 1) as f64;
    let mut out: Vec<f64> = (0..num_steps).map(|i| (hi + i as f64 / last * (lo - hi)).powf(params.rho)).collect();
    out[0] = params.sigma_max;
    out[num_steps - 1] = params.sigma_min;
    Ok(out)
}

/// Anything that maps a noisy batch at one noise level to a clean estimate.
pub trait Denoiser<T: Scalar> {
    fn denoise(&self, x: &Tensor<T>, sigma: T) -> Result<Tensor<T>>;
}

impl<T: Scalar, F: Fn(&Tensor<T>, T) -> Result<Tensor<T>>> Denoiser<T> for F {
    fn denoise(&self, x: &Tensor<T>, sigma: T) -> Result<Tensor<T>> {
        self(x, sigma)
    }
}

/// Posterior mean for data distributed as `N(0, s² I)`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianOracle {
    pub std: f64,
}

impl<T: Scalar> Denoiser<T> for GaussianOracle {
    fn denoise(&self, x: &Tensor<T>, sigma: T) -> Result<Tensor<T>> {
        let s2 = T::of(self.std * self.std);
        Ok(x.scale(s2 / (s2 + sigma * sigma)))
    }
}

/// `c_skip x + c_out F(c_in x, c_noise, cond)` for a whole batch at one level.
pub fn denoise<T: Scalar, N: Network<T>>(net: &N, x: &Tensor<T>, sigma: T, cond: &N::Cond, params: &EdmParams) -> Result<Tensor<T>> {
    let pc = precondition(sigma, params)?;
    let f = net.forward(&x.scale(pc.c_in), &vec![pc.c_noise; x.batch()], cond)?;
    x.scale(pc.c_skip).add(&f.scale(pc.c_out))
}

/// A network with fixed conditioning and guidance, counting its evaluations.
pub struct EdmDenoiser<'a, T: Scalar, N: Network<T>> {
    pub net: &'a N,
    pub cond: N::Cond,
    pub params: &'a EdmParams,
    /// Guidance weight; exactly 1 skips the unconditional pass.
    pub guidance: T,
    calls: Cell<usize>,
}

impl<'a, T: Scalar, N: Network<T>> EdmDenoiser<'a, T, N> {
    pub fn new(net: &'a N, cond: N::Cond, params: &'a EdmParams, guidance: T) -> Self {
        Self { net, cond, params, guidance, calls: Cell::new(0) }
    }

    /// Network evaluations so far. A guided evaluation runs the conditional and
    /// unconditional halves as one batch and counts once.
    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<T: Scalar, N: Network<T>> Denoiser<T> for EdmDenoiser<'_, T, N> {
    fn denoise(&self, x: &Tensor<T>, sigma: T) -> Result<Tensor<T>> {
        self.calls.set(self.calls.get() + 1);
        if self.guidance == T::one() {
            return denoise(self.net, x, sigma, &self.cond, self.params);
        }
        let b = x.batch();
        let both = self.net.with_null_half(&self.cond)?;
        let d = denoise(self.net, &Tensor::concat_batch(&[x, x])?, sigma, &both, self.params)?;
        crate::dit::cfg_combine(&d.slice_batch(0, b)?, &d.slice_batch(b, b)?, self.guidance)
    }
}

/// Heun integration of the probability-flow ODE from `x_T` (already scaled by
/// `sigma_max`) down the ladder and finally to 0, with an Euler last step.
/// Uses `2 * num_steps - 1` denoiser evaluations.
pub fn ode_integrate<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    x_t: Tensor<T>,
    num_steps: usize,
    params: &EdmParams,
) -> Result<Tensor<T>> {
    let mut sigmas = sigma_ladder(num_steps, params)?;
    sigmas.push(0.0);
    let mut x = x_t;
    for i in 0..num_steps {
        let (s, s_next) = (T::of(sigmas[i]), T::of(sigmas[i + 1]));
        let d = x.zip_map(&denoiser.denoise(&x, s)?, |a, b| (a - b) / s)?;
        let h = s_next - s;
        let euler = x.zip_map(&d, |a, b| a + h * b)?;
        x = if sigmas[i + 1] > 0.0 {
            let d2 = euler.zip_map(&denoiser.denoise(&euler, s_next)?, |a, b| (a - b) / s_next)?;
            let avg = d.zip_map(&d2, |a, b| (a + b) / T::of(2.0))?;
            x.zip_map(&avg, |a, b| a + h * b)?
        } else {
            euler
        };
        if !x.is_finite() {
            return Err(Error::Divergence(format!("non-finite sampler state at step {i}")));
        }
    }
    Ok(x)
}

/// Draws `z ~ N(0, I)` of `shape` and integrates from `z * sigma_max`.
pub fn ode_sample<T: Scalar, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    shape: &[usize],
    num_steps: usize,
    params: &EdmParams,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let z = Tensor::randn(shape, T::of(params.sigma_max), rng);
    ode_integrate(denoiser, z, num_steps, params)
}

/// Per-example noise levels and unit noise for one training batch.
#[derive(Clone, Debug)]
pub struct NoiseDraw<T> {
    pub sigmas: Vec<T>,
    pub noise: Tensor<T>,
}

impl<T: Scalar> NoiseDraw<T> {
    pub fn sample<R: Rng + ?Sized>(shape: &[usize], params: &EdmParams, rng: &mut R) -> Self {
        let sigmas = (0..shape[0]).map(|_| T::of(sample_training_sigma(rng, params))).collect();
        Self { sigmas, noise: Tensor::randn(shape, T::one(), rng) }
    }

    /// `clean + σ_b n` per example.
    pub fn noisy(&self, clean: &Tensor<T>) -> Result<Tensor<T>> {
        per_example(clean, &self.noise, &self.sigmas, |c, n, s| c + s * n)
    }
}

pub(crate) fn per_example<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, coef: &[T], f: impl Fn(T, T, T) -> T) -> Result<Tensor<T>> {
    a.same_shape(b)?;
    ensure(coef.len() == a.batch(), || "one coefficient per example required".into())?;
    let chunk = a.numel() / coef.len();
    let data = a.data().iter().zip(b.data()).enumerate().map(|(i, (&x, &y))| f(x, y, coef[i / chunk])).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Weighted denoising loss recorded on `tape`; returns the batch-mean scalar.
/// `params` are the network's parameter leaves.
pub fn diffusion_loss_tape<T: Scalar, N: Network<T>>(
    net: &N,
    tape: &mut Tape<T>,
    params: &[Var],
    clean: &Tensor<T>,
    cond: &N::Cond,
    draw: &NoiseDraw<T>,
    edm: &EdmParams,
) -> Result<Var> {
    let b = clean.batch();
    let noisy = draw.noisy(clean)?;
    let pcs = draw.sigmas.iter().map(|&s| precondition(s, edm)).collect::<Result<Vec<_>>>()?;
    let c_in: Vec<T> = pcs.iter().map(|p| p.c_in).collect();
    let c_skip: Vec<T> = pcs.iter().map(|p| p.c_skip).collect();
    let x_in = per_example(&noisy, &noisy, &c_in, |x, _, c| x * c)?;
    // c_skip x - clean does not depend on the parameters
    let base = per_example(&noisy, clean, &c_skip, |x, y, c| c * x - y)?;
    let x_in = tape.constant(&x_in);
    let c_noise: Vec<T> = pcs.iter().map(|p| p.c_noise).collect();
    let f = net.forward_tape(tape, params, x_in, &c_noise, cond)?;
    let f = tape.group_scale(f, pcs.iter().map(|p| p.c_out).collect())?;
    let base = tape.constant(&base);
    let r = tape.add(f, base)?;
    let sq = tape.square(r);
    let per = tape.sum_groups(sq, b)?;
    let w: Vec<T> = draw.sigmas.iter().map(|&s| T::of(edm.loss_weight(s.to_f64_lossy()) / b as f64)).collect();
    let weighted = tape.mul_const(per, w)?;
    let loss = tape.sum(weighted);
    if !tape.is_finite(loss) {
        return Err(Error::Divergence("non-finite diffusion loss".into()));
    }
    Ok(loss)
}

/// Same loss for an arbitrary denoiser, without gradients.
pub fn diffusion_loss_value<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    clean: &Tensor<T>,
    draw: &NoiseDraw<T>,
    edm: &EdmParams,
) -> Result<T> {
    let b = clean.batch();
    let chunk = clean.numel() / b;
    let noisy = draw.noisy(clean)?;
    let mut total = T::zero();
    for (i, &s) in draw.sigmas.iter().enumerate() {
        let xi = noisy.slice_batch(i, 1)?;
        let d = denoiser.denoise(&xi, s)?;
        let err: T = d.data().iter().zip(&clean.data()[i * chunk..(i + 1) * chunk]).map(|(&a, &c)| (a - c) * (a - c)).sum();
        total = total + T::of(edm.loss_weight(s.to_f64_lossy())) * err;
    }
    let loss = total / T::of(b as f64);
    if !loss.is_finite() {
        return Err(Error::Divergence("non-finite diffusion loss".into()));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn precondition_at_sigma_data() {
        let p = EdmParams::default();
        let c = precondition(0.5f64, &p).unwrap();
        assert!((c.c_skip - 0.5).abs() < 1e-15);
        assert!((c.c_out - 0.5 / 2f64.sqrt()).abs() < 1e-15);
        assert!((c.c_in - 1.0 / (0.5 * 2f64.sqrt())).abs() < 1e-14);
        let tiny = precondition(1e-9f64, &p).unwrap();
        assert!((tiny.c_skip - 1.0).abs() < 1e-15 && tiny.c_out < 1e-8);
        assert!(precondition(0.0f64, &p).is_err());
    }

    #[test]
    fn ladder_endpoints() {
        let p = EdmParams::default();
        assert_eq!(sigma_ladder(2, &p).unwrap(), vec![80.0, 0.002]);
        assert_eq!(sigma_ladder(1, &p).unwrap(), vec![80.0]);
        assert!(sigma_ladder(0, &p).is_err());
        let l = sigma_ladder(5, &p).unwrap();
        assert!(l.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn training_sigma_is_clamped_and_seeded() {
        let p = EdmParams::default();
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..1000).map(|_| sample_training_sigma(&mut r, &p)).collect::<Vec<_>>()
        };
        let a = draw(3);
        assert_eq!(a, draw(3));
        assert!(a.iter().all(|&s| (p.sigma_min..=p.sigma_max).contains(&s)));
    }

    #[test]
    fn single_step_sampler_returns_denoised_start() {
        let p = EdmParams::default();
        let oracle = GaussianOracle { std: 1.0 };
        let z = Tensor::<f64>::from_vec(vec![0.3, -1.1]).reshape(&[1, 2]).unwrap().scale(80.0);
        let out = ode_integrate(&oracle, z.clone(), 1, &p).unwrap();
        let want: Tensor<f64> = oracle.denoise(&z, 80.0).unwrap();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heun_call_count() {
        let p = EdmParams::default();
        let calls = Cell::new(0usize);
        let den = |x: &Tensor<f64>, s: f64| {
            calls.set(calls.get() + 1);
            GaussianOracle { std: 1.0 }.denoise(x, s)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ode_sample(&den, &[2, 3], 50, &p, &mut rng).unwrap();
        assert_eq!(calls.get(), 99);
    }

    #[test]
    fn perfect_denoiser_has_zero_loss() {
        let p = EdmParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clean = Tensor::<f64>::randn(&[1, 3, 2], 1.0, &mut rng);
        let draw = NoiseDraw::sample(clean.shape(), &p, &mut rng);
        let c = clean.clone();
        let cheat = move |_: &Tensor<f64>, _: f64| -> Result<Tensor<f64>> { Ok(c.clone()) };
        assert_eq!(diffusion_loss_value(&cheat, &clean, &draw, &p).unwrap(), 0.0);
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[batch, len, channels]` draws from `N(0, std² I)`.
pub fn gaussian_batch<T: Scalar, R: Rng + ?Sized>(std: f64, batch: usize, len: usize, channels: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(&[batch, len, channels], T::of(std), rng)
}

/// Whole-sequence Gaussian mixture: each example picks one of the component
/// means uniformly and adds isotropic noise.
#[derive(Clone, Debug)]
pub struct MixtureTask {
    pub len: usize,
    pub channels: usize,
    pub means: Vec<Vec<f64>>,
    pub std: f64,
}

impl MixtureTask {
    /// Means are random sign patterns scaled by `spread`.
    pub fn new(seed: u64, components: usize, len: usize, channels: usize, spread: f64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = (0..components)
            .map(|_| (0..len * channels).map(|_| if rng.random::<bool>() { spread } else { -spread }).collect())
            .collect();
        Self { len, channels, means, std }
    }

    pub fn sample<T: Scalar, R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Tensor<T> {
        let d = self.len * self.channels;
        let mut data = Vec::with_capacity(batch * d);
        for _ in 0..batch {
            let m = &self.means[rng.random_range(0..self.means.len())];
            let noise: Tensor<T> = Tensor::randn(&[d], T::of(self.std), rng);
            data.extend(m.iter().zip(noise.data()).map(|(&mu, &n)| T::of(mu) + n));
        }
        Tensor::new(vec![batch, self.len, self.channels], data).expect("consistent shape")
    }
}

use crate::embedding::EmbeddingSet;
use crate::error::{ensure, Result};
use crate::scalar::Scalar;

const BLOCK: usize = 512;

/// `(x·y / D + 1)^3`.
pub fn poly_kernel<T: Scalar>(x: &[T], y: &[T]) -> T {
    let d = T::of(x.len() as f64);
    let dot: T = x.iter().zip(y).map(|(&a, &b)| a * b).sum();
    (dot / d + T::one()).powi(3)
}

/// Sum of kernel values over all pairs `(a_i, b_j)`, skipping `i == j` when
/// `skip_diagonal`. Gram blocks are formed with matrix products.
fn kernel_sum<T: Scalar>(a: &EmbeddingSet<T>, b: &EmbeddingSet<T>, skip_diagonal: bool) -> T {
    let d = a.dim();
    let inv_d = T::one() / T::of(d as f64);
    let mut total = T::zero();
    let mut gram = vec![T::zero(); BLOCK * BLOCK];
    for i0 in (0..a.len()).step_by(BLOCK) {
        let m = BLOCK.min(a.len() - i0);
        let ablock = &a.data()[i0 * d..(i0 + m) * d];
        for j0 in (0..b.len()).step_by(BLOCK) {
            let n = BLOCK.min(b.len() - j0);
            let bblock = &b.data()[j0 * d..(j0 + n) * d];
            T::gemm(m, d, n, T::one(), ablock, false, bblock, true, T::zero(), &mut gram[..m * n]);
            for i in 0..m {
                for j in 0..n {
                    if skip_diagonal && i0 + i == j0 + j {
                        continue;
                    }
                    total = total + (gram[i * n + j] * inv_d + T::one()).powi(3);
                }
            }
        }
    }
    total
}

/// Unbiased squared MMD with the cubic polynomial kernel.
pub fn kernel_distance<T: Scalar>(x: &EmbeddingSet<T>, y: &EmbeddingSet<T>) -> Result<T> {
    ensure(x.dim() == y.dim(), || format!("dimension {} vs {}", x.dim(), y.dim()))?;
    ensure(x.len() >= 2 && y.len() >= 2, || "kernel distance needs at least two rows per set".into())?;
    let (m, n) = (T::of(x.len() as f64), T::of(y.len() as f64));
    let kxx = kernel_sum(x, x, true) / (m * (m - T::one()));
    let kyy = kernel_sum(y, y, true) / (n * (n - T::one()));
    let kxy = kernel_sum(x, y, false) / (m * n);
    Ok(kxx + kyy - T::of(2.0) * kxy)
}

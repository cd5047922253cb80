use crate::embedding::EmbeddingSet;
use crate::error::{ensure, Result};
use crate::scalar::Scalar;

pub fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// Distance from each row to its `k`-th nearest other row of the same set.
pub fn knn_radii<T: Scalar>(real: &EmbeddingSet<T>, k: usize) -> Result<Vec<T>> {
    ensure(k >= 1 && real.len() > k, || format!("need more than k={k} real rows, got {}", real.len()))?;
    let n = real.len();
    let mut dists = Vec::with_capacity(n - 1);
    Ok((0..n)
        .map(|i| {
            dists.clear();
            dists.extend((0..n).filter(|&j| j != i).map(|j| euclidean(real.row(i), real.row(j))));
            let (_, kth, _) = dists.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite distances"));
            *kth
        })
        .collect())
}

/// Density and coverage of `gen` with respect to `real` using closed
/// `k`-nearest-neighbour balls around the real rows.
pub fn density_coverage<T: Scalar>(real: &EmbeddingSet<T>, gen: &EmbeddingSet<T>, k: usize) -> Result<(T, T)> {
    ensure(real.dim() == gen.dim(), || format!("dimension {} vs {}", real.dim(), gen.dim()))?;
    let radii = knn_radii(real, k)?;
    let mut inside = 0usize;
    let mut covered = vec![false; real.len()];
    for g in gen.rows() {
        for (i, &r) in radii.iter().enumerate() {
            if euclidean(g, real.row(i)) <= r {
                inside += 1;
                covered[i] = true;
            }
        }
    }
    let density = T::of(inside as f64) / T::of((k * gen.len()) as f64);
    let coverage = T::of(covered.iter().filter(|&&c| c).count() as f64) / T::of(real.len() as f64);
    Ok((density, coverage))
}

/// `a·b / (|a| |b|)`.
pub fn cosine_score<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    ensure(a.len() == b.len(), || format!("length {} vs {}", a.len(), b.len()))?;
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    ensure(na > T::zero() && nb > T::zero(), || "cosine of a zero vector".into())?;
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    Ok((dot / (na * nb)).max(-T::one()).min(T::one()))
}

/// Mean cosine over matched rows of two sets of equal size.
pub fn mean_paired_cosine<T: Scalar>(a: &EmbeddingSet<T>, b: &EmbeddingSet<T>) -> Result<T> {
    ensure(a.len() == b.len(), || format!("{} rows paired with {}", a.len(), b.len()))?;
    let mut total = T::zero();
    for (x, y) in a.rows().zip(b.rows()) {
        total = total + cosine_score(x, y)?;
    }
    Ok(total / T::of(a.len() as f64))
}

use crate::embedding::EmbeddingSet;
use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;

/// Relative eigenvalue floor used when taking square roots of PSD matrices.
pub const EIG_CLAMP: f64 = 1e-10;

/// Dense row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix<T> {
    pub n: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> SquareMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![T::zero(); n * n] }
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    pub fn trace(&self) -> T {
        (0..self.n).map(|i| self.at(i, i)).sum()
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        T::gemm(n, n, n, T::one(), &self.data, false, &other.data, false, T::zero(), &mut out.data);
        out
    }

    fn symmetrize(&mut self) {
        let n = self.n;
        for i in 0..n {
            for j in i + 1..n {
                let m = (self.data[i * n + j] + self.data[j * n + i]) / T::of(2.0);
                self.data[i * n + j] = m;
                self.data[j * n + i] = m;
            }
        }
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matrix whose columns are the eigenvectors.
pub fn symmetric_eigen<T: Scalar>(a: &SquareMatrix<T>) -> (Vec<T>, SquareMatrix<T>) {
    let n = a.n;
    let mut m = a.clone();
    m.symmetrize();
    let mut v = SquareMatrix::zeros(n);
    for i in 0..n {
        v.data[i * n + i] = T::one();
    }
    let scale: T = m.data.iter().map(|&x| x * x).sum::<T>().sqrt();
    let tol = T::epsilon() * T::epsilon() * scale * scale;
    for _sweep in 0..100 {
        let off: T = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m.at(i, j) * m.at(i, j)).sum();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.at(p, q);
                if apq == T::zero() {
                    continue;
                }
                let (app, aqq) = (m.at(p, p), m.at(q, q));
                let theta = (aqq - app) / (T::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.at(k, p), m.at(k, q));
                    m.data[k * n + p] = c * mkp - s * mkq;
                    m.data[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.at(p, k), m.at(q, k));
                    m.data[p * n + k] = c * mpk - s * mqk;
                    m.data[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.at(k, p), v.at(k, q));
                    v.data[k * n + p] = c * vkp - s * vkq;
                    v.data[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m.at(i, i)).collect(), v)
}

/// Square root of a symmetric positive semi-definite matrix. Eigenvalues below
/// `EIG_CLAMP` times the largest one (including negative round-off) become 0.
pub fn sqrtm_psd<T: Scalar>(a: &SquareMatrix<T>) -> SquareMatrix<T> {
    let n = a.n;
    let (vals, vecs) = symmetric_eigen(a);
    let top = vals.iter().copied().fold(T::zero(), T::max);
    let floor = top * T::of(EIG_CLAMP);
    let roots: Vec<T> = vals.iter().map(|&l| if l > floor { l.sqrt() } else { T::zero() }).collect();
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            out.data[i * n + j] = (0..n).map(|k| vecs.at(i, k) * roots[k] * vecs.at(j, k)).sum();
        }
    }
    out
}

/// Sample mean and unbiased covariance.
pub fn mean_cov<T: Scalar>(set: &EmbeddingSet<T>) -> (Vec<T>, SquareMatrix<T>) {
    let (n, d) = (set.len(), set.dim());
    let mu = set.mean();
    let centered: Vec<T> = set.rows().flat_map(|r| r.iter().zip(&mu).map(|(&x, &m)| x - m).collect::<Vec<_>>()).collect();
    let mut cov = SquareMatrix::zeros(d);
    let denom = T::of((n.max(2) - 1) as f64);
    T::gemm(d, n, d, T::one() / denom, &centered, true, &centered, false, T::zero(), &mut cov.data);
    cov.symmetrize();
    (mu, cov)
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn frechet_distance<T: Scalar>(x: &EmbeddingSet<T>, y: &EmbeddingSet<T>) -> Result<T> {
    ensure(x.dim() == y.dim(), || format!("dimension {} vs {}", x.dim(), y.dim()))?;
    let d = x.dim();
    for (name, s) in [("first", x), ("second", y)] {
        if s.len() < d + 1 {
            return Err(Error::DegenerateInput {
                set: format!("{name} set ({:?}/{:?})", s.modality, s.source),
                detail: format!("{} rows cannot give a full-rank {d}x{d} covariance", s.len()),
            });
        }
    }
    let (mx, cx) = mean_cov(x);
    let (my, cy) = mean_cov(y);
    let mean_term: T = mx.iter().zip(&my).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let root_x = sqrtm_psd(&cx);
    let inner = root_x.matmul(&cy).matmul(&root_x);
    let cross = sqrtm_psd(&inner).trace();
    let fd = mean_term + cx.trace() + cy.trace() - T::of(2.0) * cross;
    Ok(fd.max(T::zero()))
}

use crate::error::{domain, shape, Result};
use crate::gaussian::cholesky::{cholesky, CholFactor};
use crate::gaussian::correlation::CorrelationMatrix;
use crate::linalg::{dot, Matrix};
use crate::scalar::Real;

/// Covariance `scale · F₀ ⊗ F₁ ⊗ … ⊗ F_k`, kept factored.
///
/// The first factor is the slowest-varying index, matching column-major site
/// order when the factors are `(…, C_h, C_v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerCov<T> {
    scale: T,
    factors: Vec<Matrix<T>>,
}

impl<T: Real> KroneckerCov<T> {
    pub fn new(scale: T, factors: Vec<Matrix<T>>) -> Result<Self> {
        if factors.is_empty() {
            return domain("kronecker covariance needs at least one factor");
        }
        if !(scale >= T::zero()) || !scale.is_finite() {
            return domain("kronecker scale must be finite and nonnegative");
        }
        for (k, f) in factors.iter().enumerate() {
            if !f.is_square() || f.rows() == 0 {
                return shape(format!("kronecker factor {k} is {}x{}", f.rows(), f.cols()));
            }
            if !f.is_symmetric(T::lit(1e-12) * f.max_abs().max(T::one())) {
                return domain(format!("kronecker factor {k} is not symmetric"));
            }
        }
        Ok(Self { scale, factors })
    }

    pub fn dim(&self) -> usize {
        self.factors.iter().map(Matrix::rows).product()
    }

    pub fn factors(&self) -> &[Matrix<T>] {
        &self.factors
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn to_dense(&self) -> Matrix<T> {
        let mut out = self.factors[0].clone();
        for f in &self.factors[1..] {
            out = out.kron(f);
        }
        out.scale(self.scale)
    }

    /// Product with a vector without materializing the full matrix.
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim() {
            return shape(format!("kronecker of dim {} applied to length {}", self.dim(), x.len()));
        }
        let mut y = apply_modes(&self.factors, x);
        for v in &mut y {
            *v *= self.scale;
        }
        Ok(y)
    }

    /// Cholesky factor of the full covariance, as a Kronecker product of the
    /// factor-wise Cholesky factors (`chol(A⊗B) = chol(A)⊗chol(B)`).
    pub fn cholesky_factors(&self) -> Result<Vec<CholFactor<T>>> {
        self.factors.iter().map(cholesky).collect()
    }

    /// `sqrt(scale) · (L₀ ⊗ … ⊗ L_k) z`: maps white noise to this covariance.
    pub fn color(&self, chols: &[CholFactor<T>], z: &[T]) -> Result<Vec<T>> {
        if chols.len() != self.factors.len() || z.len() != self.dim() {
            return shape("coloring factors do not match covariance");
        }
        let lowers: Vec<Matrix<T>> = chols.iter().map(|c| c.lower().clone()).collect();
        let s = self.scale.sqrt();
        Ok(apply_modes(&lowers, z).into_iter().map(|v| v * s).collect())
    }
}

/// Applies `F₀ ⊗ … ⊗ F_k` to `x` one mode at a time.
fn apply_modes<T: Real>(factors: &[Matrix<T>], x: &[T]) -> Vec<T> {
    let sizes: Vec<usize> = factors.iter().map(Matrix::rows).collect();
    let mut cur = x.to_vec();
    let mut buf = vec![T::zero(); x.len()];
    let mut col = Vec::new();
    for (k, f) in factors.iter().enumerate() {
        let n = sizes[k];
        let inner: usize = sizes[k + 1..].iter().product();
        let outer: usize = sizes[..k].iter().product();
        col.resize(n, T::zero());
        for o in 0..outer {
            for s in 0..inner {
                let base = o * n * inner + s;
                for (j, c) in col.iter_mut().enumerate() {
                    *c = cur[base + j * inner];
                }
                for i in 0..n {
                    buf[base + i * inner] = dot(f.row(i), &col);
                }
            }
        }
        std::mem::swap(&mut cur, &mut buf);
    }
    cur
}

/// `Σ⁰ ⊗ C_h ⊗ C_v`.
pub fn kronecker_cov<T: Real>(
    sigma0: &Matrix<T>,
    c_h: &CorrelationMatrix<T>,
    c_v: &CorrelationMatrix<T>,
) -> Result<KroneckerCov<T>> {
    KroneckerCov::new(
        T::one(),
        vec![sigma0.clone(), c_h.as_matrix().clone(), c_v.as_matrix().clone()],
    )
}

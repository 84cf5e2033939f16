//! Cholesky factorization with the shared diagonal-jitter repair policy.

use crate::error::{shape, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::scalar::Real;

/// Relative jitter ladder, as multiples of the mean diagonal.
const JITTER_LADDER: [f64; 7] = [1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Lower-triangular factor `L` with `L Lᵀ ≈ A + jitter·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor<T> {
    lower: Matrix<T>,
    jitter_used: T,
}

/// Plain factorization; on failure returns the failing pivot and its value.
fn factor_in_place<T: Real>(a: &mut Matrix<T>, jitter: T) -> std::result::Result<(), (usize, T)> {
    let n = a.rows();
    for i in 0..n {
        for j in 0..=i {
            let (ri, rj) = if i == j {
                let r = a.row(i);
                (r, r)
            } else {
                // rows i and j are disjoint ranges; j < i
                let (head, tail) = a.as_slice().split_at(i * n);
                (&tail[..n], &head[j * n..(j + 1) * n])
            };
            let s = dot(&ri[..j], &rj[..j]);
            if i == j {
                let d = a[(i, i)] + jitter - s;
                if !(d > T::zero()) || !d.is_finite() {
                    return Err((i, d));
                }
                a[(i, i)] = d.sqrt();
            } else {
                let v = (a[(i, j)] - s) / a[(j, j)];
                a[(i, j)] = v;
            }
        }
        for j in i + 1..n {
            a[(i, j)] = T::zero();
        }
    }
    Ok(())
}

/// Factors a symmetric matrix, escalating diagonal jitter from `1e-12` to
/// `1e-6` of the mean diagonal when the plain factorization fails.
pub fn cholesky<T: Real>(m: &Matrix<T>) -> Result<CholFactor<T>> {
    if !m.is_square() {
        return shape(format!("cholesky of a {}x{} matrix", m.rows(), m.cols()));
    }
    let n = m.rows();
    let mut work = m.clone();
    let (mut pivot, mut value) = match factor_in_place(&mut work, T::zero()) {
        Ok(()) => {
            return Ok(CholFactor {
                lower: work,
                jitter_used: T::zero(),
            })
        }
        Err(e) => e,
    };
    let mean_diag = if n == 0 {
        T::zero()
    } else {
        m.diag().into_iter().sum::<T>() / T::lit(n as f64)
    };
    let mut jitter = T::zero();
    if mean_diag > T::zero() && mean_diag.is_finite() {
        for rel in JITTER_LADDER {
            jitter = mean_diag * T::lit(rel);
            work = m.clone();
            match factor_in_place(&mut work, jitter) {
                Ok(()) => {
                    return Ok(CholFactor {
                        lower: work,
                        jitter_used: jitter,
                    })
                }
                Err((p, v)) => {
                    pivot = p;
                    value = v;
                }
            }
        }
    }
    Err(Error::NotPositiveSemidefinite {
        pivot,
        value: value.f64(),
        jitter: jitter.f64(),
    })
}

/// Factorization for conditioning: fails when the matrix is numerically
/// singular, i.e. when the repair jitter dominates some pivot.
pub fn cholesky_nonsingular<T: Real>(m: &Matrix<T>, what: &str) -> Result<CholFactor<T>> {
    let f = cholesky(m).map_err(|e| Error::Degenerate(format!("{what}: {e}")))?;
    if f.jitter_used > T::zero() {
        let min_pivot_sq = f
            .lower
            .diag()
            .into_iter()
            .map(|d| d * d)
            .fold(T::infinity(), T::min);
        if min_pivot_sq <= T::lit(10.0) * f.jitter_used {
            return Err(Error::Degenerate(format!(
                "{what}: matrix is singular (smallest pivot² {:e} vs jitter {:e})",
                min_pivot_sq.f64(),
                f.jitter_used.f64()
            )));
        }
    }
    Ok(f)
}

impl<T: Real> CholFactor<T> {
    /// Wraps an existing lower-triangular factor with positive diagonal.
    pub fn from_lower(lower: Matrix<T>) -> Result<Self> {
        if !lower.is_square() {
            return shape("cholesky factor must be square");
        }
        if lower.diag().iter().any(|&d| !(d > T::zero())) {
            return Err(Error::Domain("cholesky factor needs a positive diagonal".into()));
        }
        Ok(Self {
            lower,
            jitter_used: T::zero(),
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    #[inline]
    pub fn lower(&self) -> &Matrix<T> {
        &self.lower
    }

    #[inline]
    pub fn jitter_used(&self) -> T {
        self.jitter_used
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        self.lower
            .matmul_t(&self.lower)
            .expect("square factor is conformable with itself")
    }

    /// `log det(L Lᵀ)`.
    pub fn log_det(&self) -> T {
        T::lit(2.0) * self.lower.diag().into_iter().map(|d| d.ln()).sum::<T>()
    }

    /// `L x`.
    pub fn mul_lower(&self, x: &[T]) -> Result<Vec<T>> {
        let n = self.dim();
        if x.len() != n {
            return shape(format!("factor of dim {n} applied to vector of length {}", x.len()));
        }
        Ok((0..n).map(|i| dot(&self.lower.row(i)[..=i], &x[..=i])).collect())
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[T]) -> Result<Vec<T>> {
        let n = self.dim();
        if b.len() != n {
            return shape(format!("factor of dim {n} solving rhs of length {}", b.len()));
        }
        let mut y = b.to_vec();
        for i in 0..n {
            let row = self.lower.row(i);
            y[i] = (y[i] - dot(&row[..i], &y[..i])) / row[i];
        }
        Ok(y)
    }

    /// Solves `Lᵀ x = y`.
    pub fn solve_upper(&self, y: &[T]) -> Result<Vec<T>> {
        let n = self.dim();
        if y.len() != n {
            return shape(format!("factor of dim {n} solving rhs of length {}", y.len()));
        }
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            x[i] = x[i] / self.lower[(i, i)];
            let xi = x[i];
            let row = self.lower.row(i);
            for k in 0..i {
                x[k] -= row[k] * xi;
            }
        }
        Ok(x)
    }

    /// Solves `L Lᵀ x = b`.
    pub fn solve(&self, b: &[T]) -> Result<Vec<T>> {
        self.solve_upper(&self.solve_lower(b)?)
    }

    /// Solves `L Y = B` for a matrix right-hand side (row-wise forward
    /// substitution, so every update is a contiguous row operation).
    pub fn solve_lower_mat(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        let n = self.dim();
        if b.rows() != n {
            return shape(format!("factor of dim {n} solving {}x{} rhs", b.rows(), b.cols()));
        }
        let mut y = b.clone();
        let k = b.cols();
        for i in 0..n {
            let row = self.lower.row(i);
            let (done, rest) = y.as_mut_slice().split_at_mut(i * k);
            let yi = &mut rest[..k];
            for (j, &l) in row[..i].iter().enumerate() {
                if l != T::zero() {
                    let src = &done[j * k..(j + 1) * k];
                    for (t, &s) in yi.iter_mut().zip(src) {
                        *t -= l * s;
                    }
                }
            }
            let inv = T::one() / row[i];
            for t in yi.iter_mut() {
                *t *= inv;
            }
        }
        Ok(y)
    }

    /// `L⁻¹`.
    pub fn inverse_lower(&self) -> Matrix<T> {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        for i in 0..n {
            let row = self.lower.row(i);
            let d = row[i];
            // row i of L⁻¹: (e_i - Σ_{k<i} L_ik row_k(L⁻¹)) / L_ii
            let mut acc = vec![T::zero(); i + 1];
            acc[i] = T::one();
            for (k, &l) in row[..i].iter().enumerate() {
                if l != T::zero() {
                    let src = &inv.row(k)[..=k];
                    for (a, &s) in acc.iter_mut().zip(src) {
                        *a -= l * s;
                    }
                }
            }
            for (dst, a) in inv.row_mut(i).iter_mut().zip(acc) {
                *dst = a / d;
            }
        }
        inv
    }

    /// `(L Lᵀ)⁻¹ = L⁻ᵀ L⁻¹`.
    pub fn inverse(&self) -> Matrix<T> {
        self.inverse_lower().gram()
    }

    /// Converts to another scalar type.
    pub fn cast<U: Real>(&self) -> CholFactor<U> {
        CholFactor {
            lower: self.lower.cast(),
            jitter_used: U::lit(self.jitter_used.f64()),
        }
    }
}

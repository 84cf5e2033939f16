use crate::error::{domain, Result};
use crate::gaussian::grid::GridSpec;
use crate::linalg::Matrix;
use crate::scalar::Real;

/// Symmetric correlation matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix<T> {
    values: Matrix<T>,
}

impl<T: Real> CorrelationMatrix<T> {
    /// Wraps a matrix after checking symmetry and the unit diagonal.
    pub fn from_matrix(values: Matrix<T>) -> Result<Self> {
        let tol = T::lit(1e-12);
        if !values.is_symmetric(tol) {
            return domain("correlation matrix must be symmetric");
        }
        if values.diag().iter().any(|&d| (d - T::one()).abs() > tol) {
            return domain("correlation matrix must have unit diagonal");
        }
        Ok(Self { values })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            values: Matrix::identity(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.rows()
    }

    pub fn as_matrix(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.values
    }
}

fn check_range(name: &str, d: f64) -> Result<()> {
    if !(d >= 0.0) || !d.is_finite() {
        return domain(format!("{name} range must be finite and nonnegative, got {d}"));
    }
    Ok(())
}

/// Exponential correlation factor along one axis. A range of exactly zero is
/// the white-noise limit: one at zero distance, zero elsewhere.
#[inline]
fn axis_factor(steps: usize, spacing: f64, range: f64) -> f64 {
    if steps == 0 {
        1.0
    } else if range == 0.0 {
        0.0
    } else {
        (-(steps as f64) * spacing / range).exp()
    }
}

/// `ρ(τ) = exp(-τ_h/d_h - τ_v/d_v)` over all pairs of grid sites.
pub fn exp_correlation_matrix<T: Real>(grid: &GridSpec, d_h: T, d_v: T) -> Result<CorrelationMatrix<T>> {
    let (d_h, d_v) = (d_h.f64(), d_v.f64());
    check_range("horizontal", d_h)?;
    check_range("vertical", d_v)?;
    let h: Vec<f64> = (0..grid.n_cols)
        .map(|k| axis_factor(k, grid.spacing_h, d_h))
        .collect();
    let v: Vec<f64> = (0..grid.n_rows)
        .map(|k| axis_factor(k, grid.spacing_v, d_v))
        .collect();
    let p = grid.len();
    let values = Matrix::from_fn(p, p, |i, j| {
        let (ri, ci) = grid.coords(i);
        let (rj, cj) = grid.coords(j);
        T::lit(h[ci.abs_diff(cj)] * v[ri.abs_diff(rj)])
    });
    Ok(CorrelationMatrix { values })
}

/// One-dimensional exponential correlation over `n` equally spaced points.
pub fn exp_correlation_1d<T: Real>(n: usize, spacing: f64, range: T) -> Result<CorrelationMatrix<T>> {
    let range = range.f64();
    check_range("axis", range)?;
    if n == 0 {
        return domain("axis must have at least one point");
    }
    let f: Vec<f64> = (0..n).map(|k| axis_factor(k, spacing, range)).collect();
    Ok(CorrelationMatrix {
        values: Matrix::from_fn(n, n, |i, j| T::lit(f[i.abs_diff(j)])),
    })
}

//! Dense Gaussian linear algebra: lattice geometry, exponential correlation,
//! Cholesky factorization, Gaussian conditioning, Kronecker covariances and
//! the univariate normal functions.

pub mod cholesky;
pub mod conditional;
pub mod correlation;
pub mod grid;
pub mod kronecker;
pub mod normal;

pub use cholesky::{cholesky, cholesky_nonsingular, CholFactor};
pub use conditional::{
    conditional_gaussian, conditional_with_factor, sequential_conditionals, GaussianSplit,
    SequentialConditioner,
};
pub use correlation::{exp_correlation_1d, exp_correlation_matrix, CorrelationMatrix};
pub use grid::GridSpec;
pub use kronecker::{kronecker_cov, KroneckerCov};
pub use normal::{norm_log_cdf, norm_log_pdf, norm_pdf_cdf};

use crate::error::{shape, Result};
use crate::linalg::norm_sq;
use crate::scalar::Real;

/// `log φ_n(x; mean, L Lᵀ)`.
pub fn mvn_log_pdf<T: Real>(x: &[T], mean: &[T], chol: &CholFactor<T>) -> Result<T> {
    if x.len() != mean.len() || x.len() != chol.dim() {
        return shape("mvn_log_pdf: dimensions differ");
    }
    let resid: Vec<T> = x.iter().zip(mean).map(|(&a, &b)| a - b).collect();
    let w = chol.solve_lower(&resid)?;
    let n = T::lit(x.len() as f64);
    Ok(-T::lit(0.5) * (n * T::lit((2.0 * std::f64::consts::PI).ln()) + chol.log_det() + norm_sq(&w)))
}

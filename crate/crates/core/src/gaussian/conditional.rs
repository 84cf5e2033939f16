use crate::error::{domain, shape, Result};
use crate::gaussian::cholesky::{cholesky_nonsingular, CholFactor};
use crate::linalg::{dot, Matrix};
use crate::scalar::Real;

/// Joint Gaussian over `(a, b)` split into conformable blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSplit<T> {
    pub mean_a: Vec<T>,
    pub mean_b: Vec<T>,
    pub cov_aa: Matrix<T>,
    /// `Cov(a, b)`, shape `|a| × |b|`.
    pub cov_ab: Matrix<T>,
    pub cov_bb: Matrix<T>,
}

impl<T: Real> GaussianSplit<T> {
    fn check(&self) -> Result<()> {
        let (na, nb) = (self.mean_a.len(), self.mean_b.len());
        if self.cov_aa.rows() != na || !self.cov_aa.is_square() {
            return shape("cov_aa does not match mean_a");
        }
        if self.cov_bb.rows() != nb || !self.cov_bb.is_square() {
            return shape("cov_bb does not match mean_b");
        }
        if self.cov_ab.rows() != na || self.cov_ab.cols() != nb {
            return shape("cov_ab is not |a| x |b|");
        }
        Ok(())
    }
}

/// Law of `a | b = observed_b`: returns the conditional mean and covariance.
pub fn conditional_gaussian<T: Real>(split: &GaussianSplit<T>, observed_b: &[T]) -> Result<(Vec<T>, Matrix<T>)> {
    split.check()?;
    if observed_b.len() != split.mean_b.len() {
        return shape("observed_b length differs from mean_b");
    }
    if observed_b.is_empty() {
        return Ok((split.mean_a.clone(), split.cov_aa.clone()));
    }
    let chol = cholesky_nonsingular(&split.cov_bb, "conditioning covariance")?;
    conditional_with_factor(split, &chol, observed_b)
}

/// As [`conditional_gaussian`] with a precomputed factor of `cov_bb`.
pub fn conditional_with_factor<T: Real>(
    split: &GaussianSplit<T>,
    chol_bb: &CholFactor<T>,
    observed_b: &[T],
) -> Result<(Vec<T>, Matrix<T>)> {
    // V = L⁻¹ cov_ba, so cov_ab cov_bb⁻¹ cov_ba = VᵀV
    let v = chol_bb.solve_lower_mat(&split.cov_ab.transpose())?;
    let resid: Vec<T> = observed_b
        .iter()
        .zip(&split.mean_b)
        .map(|(&o, &m)| o - m)
        .collect();
    let w = chol_bb.solve_lower(&resid)?;
    let shift = v.tr_matvec(&w)?;
    let mean = split
        .mean_a
        .iter()
        .zip(shift)
        .map(|(&m, s)| m + s)
        .collect();
    let mut cov = split.cov_aa.sub(&v.gram())?;
    cov.symmetrize();
    Ok((mean, cov))
}

/// Incremental sequential conditionals of `N(mean, L Lᵀ)`.
///
/// After pushing values for components `0..i`, [`Self::next`] returns the
/// exact conditional mean and standard deviation of component `i` in `O(i)`.
#[derive(Debug, Clone)]
pub struct SequentialConditioner<'a, T> {
    chol: &'a CholFactor<T>,
    mean: &'a [T],
    z: Vec<T>,
}

impl<'a, T: Real> SequentialConditioner<'a, T> {
    pub fn new(chol: &'a CholFactor<T>, mean: &'a [T]) -> Result<Self> {
        if mean.len() != chol.dim() {
            return shape("mean length differs from factor dimension");
        }
        Ok(Self {
            chol,
            mean,
            z: Vec::with_capacity(mean.len()),
        })
    }

    pub fn position(&self) -> usize {
        self.z.len()
    }

    /// Conditional `(mean, sd)` of the next component.
    pub fn next(&self) -> Result<(T, T)> {
        let i = self.z.len();
        if i >= self.mean.len() {
            return domain(format!("all {} components already conditioned", self.mean.len()));
        }
        let row = self.chol.lower().row(i);
        Ok((self.mean[i] + dot(&row[..i], &self.z), row[i]))
    }

    /// Records the value of the next component.
    pub fn push(&mut self, x: T) -> Result<()> {
        let (m, sd) = self.next()?;
        self.z.push((x - m) / sd);
        Ok(())
    }
}

/// Conditional `(mean, sd)` of component `i` (0-based) given the values of
/// components `0..i` under `N(mean, L Lᵀ)`.
pub fn sequential_conditionals<T: Real>(
    chol: &CholFactor<T>,
    mean: &[T],
    values_prefix: &[T],
    i: usize,
) -> Result<(T, T)> {
    if i >= chol.dim() {
        return domain(format!("index {i} out of range for dimension {}", chol.dim()));
    }
    if values_prefix.len() != i {
        return domain(format!("prefix has length {} but index is {i}", values_prefix.len()));
    }
    let mut seq = SequentialConditioner::new(chol, mean)?;
    for &x in values_prefix {
        seq.push(x)?;
    }
    seq.next()
}

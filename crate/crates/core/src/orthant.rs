//! Orthant probabilities `Φ_n(0; μ, Σ)` by sequential importance sampling.
//!
//! Each sample draws `x_i` from the zero-truncated conditional of
//! `N(μ + η, Σ)` given `x_{<i}`, so every draw lies in the orthant. With
//! `x = μ + η + L z` the importance weight is
//!
//! ```text
//! w(x) = Π Φ(b_i) · exp(-zᵀv - |v|²/2),   v = L⁻¹η,  b_i = -(cond. mean)/L_ii
//! ```
//!
//! Samples run in fixed-size chunks; chunk partial sums are merged by a
//! pairwise tree in chunk order, so results do not depend on the thread
//! count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{domain, shape, Error, Result};
use crate::gaussian::cholesky::{cholesky, CholFactor};
use crate::gaussian::normal::{std_log_cdf, std_pdf, truncated_upper_draw};
use crate::linalg::{axpy, norm_sq, Matrix};
use crate::scalar::Real;

const CHUNK: usize = 64;

/// Shift scale for fully correlated rows.
pub const SHIFT_SCALE: f64 = -1.8;

/// Fixed uniforms reused across evaluations (common random numbers).
#[derive(Debug, Clone, PartialEq)]
pub struct CrnStream {
    seed: u64,
    n_samples: usize,
    dim: usize,
    uniforms: Vec<f64>,
}

impl CrnStream {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Uniforms of sample `j`, length `dim`.
    pub fn sample(&self, j: usize) -> &[f64] {
        &self.uniforms[j * self.dim..(j + 1) * self.dim]
    }

    /// All uniforms, sample-major.
    pub fn uniforms(&self) -> &[f64] {
        &self.uniforms
    }
}

/// Generates an `n_samples × dim` block of uniforms strictly inside `(0, 1)`.
pub fn make_crn(seed: u64, n_samples: usize, dim: usize) -> Result<CrnStream> {
    if n_samples == 0 {
        return domain("CRN stream needs at least one sample");
    }
    if dim == 0 {
        return domain("CRN stream needs positive dimension");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniforms = (0..n_samples * dim).map(|_| open_uniform(&mut rng)).collect();
    Ok(CrnStream {
        seed,
        n_samples,
        dim,
        uniforms,
    })
}

/// Uniform on the open interval, from the top 53 bits.
#[inline]
pub fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    ((rng.random::<u64>() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// `η_i = -1.8 Σ_ii w_i`, with `w_i` the mean absolute off-diagonal
/// correlation of row `i`.
pub fn default_shift<T: Real>(cov: &Matrix<T>) -> Result<Vec<T>> {
    if !cov.is_square() {
        return shape("covariance is not square");
    }
    let n = cov.rows();
    if n <= 1 {
        return Ok(vec![T::zero(); n]);
    }
    let sd: Vec<f64> = cov.diag().iter().map(|v| v.f64().max(0.0).sqrt()).collect();
    Ok((0..n)
        .map(|i| {
            let row = cov.row(i);
            let mut acc = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let den = sd[i] * sd[j];
                if den > 0.0 {
                    acc += (row[j].f64() / den).abs();
                }
            }
            let w = (acc / (n - 1) as f64).min(1.0);
            T::lit(SHIFT_SCALE * cov[(i, i)].f64() * w)
        })
        .collect())
}

/// `η_i = -1.8 Σ_ii R_i`, with `R_i` the multiple correlation of `x_i` on
/// `x_{<i}` read off the factor (`R_i² = 1 - L_ii²/Σ_ii`).
///
/// Suited to lattice fields, where rows are dominated by a few neighbours and
/// the mean-correlation rule of [`default_shift`] collapses to zero.
pub fn conditional_shift<T: Real>(chol: &CholFactor<T>) -> Vec<T> {
    let l = chol.lower();
    (0..chol.dim())
        .map(|i| {
            let var = dot_row(l.row(i), i + 1);
            let r2 = if var > 0.0 { 1.0 - l[(i, i)].f64().powi(2) / var } else { 0.0 };
            T::lit(SHIFT_SCALE * var * r2.max(0.0).sqrt())
        })
        .collect()
}

fn dot_row<T: Real>(row: &[T], len: usize) -> f64 {
    row[..len].iter().map(|v| v.f64() * v.f64()).sum()
}

/// How the importance mean shift is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum ShiftPolicy {
    /// [`default_shift`].
    #[default]
    MeanCorrelation,
    /// [`conditional_shift`].
    Conditional,
    /// `η_i = c Σ_ii`.
    Constant(f64),
    /// `η = 0`.
    Zero,
}

impl ShiftPolicy {
    pub fn shift<T: Real>(&self, cov: &Matrix<T>, chol: &CholFactor<T>) -> Result<Vec<T>> {
        match *self {
            ShiftPolicy::MeanCorrelation => default_shift(cov),
            ShiftPolicy::Conditional => Ok(conditional_shift(chol)),
            ShiftPolicy::Constant(c) => Ok(cov.diag().into_iter().map(|v| T::lit(c) * v).collect()),
            ShiftPolicy::Zero => Ok(vec![T::zero(); cov.rows()]),
        }
    }
}

/// Orthant problem `Φ_n(0; mean, L Lᵀ)` with importance mean shift `η`.
#[derive(Debug, Clone)]
pub struct OrthantProblem<T> {
    mean: Vec<T>,
    chol: CholFactor<T>,
    shift: Vec<T>,
    // L⁻¹ η
    white_shift: Vec<T>,
}

impl<T: Real> OrthantProblem<T> {
    /// Factors `cov` and fills the default shift.
    pub fn new(mean: Vec<T>, cov: &Matrix<T>) -> Result<Self> {
        let shift = default_shift(cov)?;
        let chol = cholesky(cov)?;
        Self::with_shift(mean, chol, shift)
    }

    /// Factors `cov` and fills the shift chosen by `policy`.
    pub fn with_policy(mean: Vec<T>, cov: &Matrix<T>, policy: ShiftPolicy) -> Result<Self> {
        let chol = cholesky(cov)?;
        let shift = policy.shift(cov, &chol)?;
        Self::with_shift(mean, chol, shift)
    }

    /// Problem with no mean shift.
    pub fn unshifted(mean: Vec<T>, chol: CholFactor<T>) -> Result<Self> {
        let n = mean.len();
        Self::with_shift(mean, chol, vec![T::zero(); n])
    }

    pub fn with_shift(mean: Vec<T>, chol: CholFactor<T>, shift: Vec<T>) -> Result<Self> {
        if mean.is_empty() {
            return domain("orthant problem needs positive dimension");
        }
        if mean.len() != chol.dim() || shift.len() != chol.dim() {
            return shape(format!(
                "orthant problem: mean {}, factor {}, shift {}",
                mean.len(),
                chol.dim(),
                shift.len()
            ));
        }
        if shift.iter().any(|s| !s.is_finite()) {
            return domain("mean shift must be finite");
        }
        let white_shift = chol.solve_lower(&shift)?;
        Ok(Self {
            mean,
            chol,
            shift,
            white_shift,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn chol(&self) -> &CholFactor<T> {
        &self.chol
    }

    pub fn shift(&self) -> &[T] {
        &self.shift
    }

    /// Same probability with variables sorted by standardized upper limit,
    /// most constrained first.
    pub fn reordered(&self) -> Result<Self> {
        let cov = self.chol.reconstruct();
        let n = self.dim();
        let mut order: Vec<usize> = (0..n).collect();
        let limit = |i: usize| -(self.mean[i] + self.shift[i]).f64() / cov[(i, i)].f64().sqrt();
        order.sort_by(|&a, &b| limit(a).total_cmp(&limit(b)).then(a.cmp(&b)));
        let mean = order.iter().map(|&i| self.mean[i]).collect();
        let shift = order.iter().map(|&i| self.shift[i]).collect();
        let chol = cholesky(&cov.select(&order, &order))?;
        Self::with_shift(mean, chol, shift)
    }
}

/// Estimate of an orthant probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthantEstimate {
    pub log_value: f64,
    /// Standard error of the probability itself (may underflow to 0).
    pub std_error: f64,
    pub log_std_error: f64,
    pub n_used: usize,
}

impl OrthantEstimate {
    pub fn value(&self) -> f64 {
        self.log_value.exp()
    }

    /// Delta-method standard error of `log_value`.
    pub fn log_scale_se(&self) -> f64 {
        (self.log_std_error - self.log_value).exp()
    }
}

#[derive(Debug, Clone, Copy)]
struct Partial {
    max: f64,
    s1: f64,
    s2: f64,
}

impl Partial {
    const EMPTY: Partial = Partial {
        max: f64::NEG_INFINITY,
        s1: 0.0,
        s2: 0.0,
    };

    fn from_logs(lw: &[f64]) -> Self {
        let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Self::EMPTY;
        }
        let (mut s1, mut s2) = (0.0, 0.0);
        for &l in lw {
            let e = (l - max).exp();
            s1 += e;
            s2 += e * e;
        }
        Partial { max, s1, s2 }
    }

    fn merge(a: Partial, b: Partial) -> Partial {
        if a.max == f64::NEG_INFINITY {
            return b;
        }
        if b.max == f64::NEG_INFINITY {
            return a;
        }
        let max = a.max.max(b.max);
        let (ea, eb) = ((a.max - max).exp(), (b.max - max).exp());
        Partial {
            max,
            s1: a.s1 * ea + b.s1 * eb,
            s2: a.s2 * ea * ea + b.s2 * eb * eb,
        }
    }
}

fn tree_reduce(mut parts: Vec<Partial>) -> Partial {
    if parts.is_empty() {
        return Partial::EMPTY;
    }
    while parts.len() > 1 {
        parts = parts
            .chunks(2)
            .map(|c| if c.len() == 2 { Partial::merge(c[0], c[1]) } else { c[0] })
            .collect();
    }
    parts[0]
}

/// Log importance weights for samples `start..start+len`.
fn chunk_log_weights<T: Real>(
    problem: &OrthantProblem<T>,
    crn: &CrnStream,
    start: usize,
    len: usize,
) -> Result<Vec<f64>> {
    let n = problem.dim();
    let l = problem.chol.lower();
    let base: Vec<T> = problem
        .mean
        .iter()
        .zip(&problem.shift)
        .map(|(&m, &s)| m + s)
        .collect();
    let v = &problem.white_shift;
    let half_v2 = 0.5 * norm_sq(v).f64();
    // z stored coordinate-major: row i holds coordinate i of every sample
    let mut z = vec![T::zero(); n * len];
    let mut cond = vec![T::zero(); len];
    let mut lw = vec![-half_v2; len];
    for i in 0..n {
        cond.fill(base[i]);
        let row = l.row(i);
        for k in 0..i {
            let c = row[k];
            if c != T::zero() {
                axpy(c, &z[k * len..(k + 1) * len], &mut cond);
            }
        }
        let sd = row[i].f64();
        let vi = v[i].f64();
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::Numerical {
                sample: start,
                index: i,
                detail: format!("conditional sd is {sd}"),
            });
        }
        let zi = &mut z[i * len..(i + 1) * len];
        for s in 0..len {
            let u = crn.uniforms[(start + s) * crn.dim + i];
            let b = -cond[s].f64() / sd;
            let (draw, log_norm) = truncated_upper_draw(b, u);
            zi[s] = T::lit(draw);
            lw[s] += log_norm - draw * vi;
        }
    }
    if let Some(s) = lw.iter().position(|w| !w.is_finite() && *w != f64::NEG_INFINITY) {
        return Err(Error::Numerical {
            sample: start + s,
            index: n - 1,
            detail: format!("log weight is {}", lw[s]),
        });
    }
    Ok(lw)
}

/// Importance-sampling estimate of `Φ_n(0; μ, Σ)` using every sample of `crn`.
pub fn estimate_orthant<T: Real>(problem: &OrthantProblem<T>, crn: &CrnStream) -> Result<OrthantEstimate> {
    if crn.dim != problem.dim() {
        return shape(format!(
            "CRN dimension {} differs from problem dimension {}",
            crn.dim,
            problem.dim()
        ));
    }
    let n_samples = crn.n_samples;
    let n_chunks = n_samples.div_ceil(CHUNK);
    let parts: Vec<Partial> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let len = CHUNK.min(n_samples - start);
            chunk_log_weights(problem, crn, start, len).map(|lw| Partial::from_logs(&lw))
        })
        .collect::<Result<_>>()?;
    let total = tree_reduce(parts);
    let nf = n_samples as f64;
    if total.max == f64::NEG_INFINITY {
        return Ok(OrthantEstimate {
            log_value: f64::NEG_INFINITY,
            std_error: 0.0,
            log_std_error: f64::NEG_INFINITY,
            n_used: n_samples,
        });
    }
    let m1 = total.s1 / nf;
    let m2 = total.s2 / nf;
    let log_value = total.max + m1.ln();
    let log_std_error = if n_samples > 1 {
        let var = (m2 - m1 * m1).max(0.0) * nf / (nf - 1.0);
        total.max + 0.5 * (var / nf).ln()
    } else {
        f64::INFINITY
    };
    Ok(OrthantEstimate {
        log_value,
        std_error: log_std_error.exp(),
        log_std_error,
        n_used: n_samples,
    })
}

/// `log Φ(num) - log Φ(den)`. Passing the same stream twice shares the
/// uniforms between the two estimates.
pub fn log_orthant_ratio<T: Real>(
    numerator: &OrthantProblem<T>,
    denominator: &OrthantProblem<T>,
    crn_num: &CrnStream,
    crn_den: &CrnStream,
) -> Result<f64> {
    let a = estimate_orthant(numerator, crn_num)?;
    let b = estimate_orthant(denominator, crn_den)?;
    Ok(a.log_value - b.log_value)
}

/// `Φ_n(0; m1, Σ)` for an equicorrelated `Σ` (unit variances, correlation
/// `rho ∈ [0, 1]`) by one-dimensional quadrature over the common factor:
///
/// ```text
/// P = ∫ φ(t) Φ((-m - √ρ t) / √(1-ρ))ⁿ dt
/// ```
pub fn equicorrelated_orthant(n: usize, rho: f64, mean: f64) -> Result<f64> {
    if n == 0 {
        return domain("dimension must be positive");
    }
    if !(0.0..=1.0).contains(&rho) || !mean.is_finite() {
        return domain("rho must lie in [0, 1] and the mean must be finite");
    }
    if rho >= 1.0 - 1e-12 {
        return Ok(std_log_cdf(-mean).exp());
    }
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    // composite Simpson on [-12, 12]
    let k = 4000;
    let h = 24.0 / k as f64;
    let total: f64 = (0..=k)
        .map(|i| {
            let t = -12.0 + i as f64 * h;
            let w = if i == 0 || i == k { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            w * std_pdf(t) * (n as f64 * std_log_cdf((-mean - a * t) / b)).exp()
        })
        .sum();
    Ok(total * h / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn equicorrelated(n: usize, rho: f64) -> Matrix<f64> {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { rho })
    }

    fn within(est: &OrthantEstimate, truth: f64, k: f64) -> bool {
        (est.value() - truth).abs() <= k * est.std_error
    }

    #[test]
    fn crn_is_deterministic_and_open() {
        let a = make_crn(11, 100, 3).unwrap();
        let b = make_crn(11, 100, 3).unwrap();
        assert_eq!(a, b);
        let c = make_crn(12, 100, 3).unwrap();
        assert_ne!(a.sample(0)[0], c.sample(0)[0]);
        assert!(a.uniforms().iter().all(|&u| u > 0.0 && u < 1.0));
        assert!(make_crn(1, 10, 0).is_err());
        assert!(make_crn(1, 0, 3).is_err());
    }

    #[test]
    fn shift_policy() {
        let d = Matrix::from_diag(&[1.0, 2.0, 0.5]);
        assert_eq!(default_shift(&d).unwrap(), vec![0.0; 3]);
        let eta = default_shift(&equicorrelated(2, 0.9)).unwrap();
        for e in eta {
            assert!((e + 1.62).abs() < 1e-12);
        }
        assert_eq!(default_shift(&Matrix::from_diag(&[3.0])).unwrap(), vec![0.0]);
    }

    #[test]
    fn univariate_half() {
        let p = OrthantProblem::new(vec![0.0], &Matrix::identity(1)).unwrap();
        let est = estimate_orthant(&p, &make_crn(1, 10_000, 1).unwrap()).unwrap();
        // one-dimensional weights are constant
        assert!((est.value() - 0.5).abs() < 1e-14);
        assert!(within(&est, 0.5, 3.0));
    }

    #[test]
    fn independent_product() {
        let p = OrthantProblem::new(vec![0.0; 4], &Matrix::identity(4)).unwrap();
        let est = estimate_orthant(&p, &make_crn(2, 10_000, 4).unwrap()).unwrap();
        assert!((est.value() - 0.0625).abs() < 1e-14);
    }

    #[test]
    fn bivariate_third() {
        let p = OrthantProblem::new(vec![0.0; 2], &equicorrelated(2, 0.5)).unwrap();
        let est = estimate_orthant(&p, &make_crn(3, 50_000, 2).unwrap()).unwrap();
        let truth = 0.25 + 0.5f64.asin() / (2.0 * std::f64::consts::PI);
        assert!((truth - 1.0 / 3.0).abs() < 1e-15);
        assert!(within(&est, truth, 3.0), "{est:?}");
    }

    #[test]
    fn conditional_shift_examples() {
        let diag = cholesky(&Matrix::from_diag(&[1.0, 2.0])).unwrap();
        assert_eq!(conditional_shift(&diag), vec![0.0, 0.0]);
        let f = cholesky(&equicorrelated(2, 0.9)).unwrap();
        let eta = conditional_shift(&f);
        assert_eq!(eta[0], 0.0);
        assert!((eta[1] + 1.62).abs() < 1e-12);
    }

    #[test]
    fn error_shrinks_with_samples() {
        let p = OrthantProblem::new(vec![0.3, -0.2, 0.1], &equicorrelated(3, 0.6)).unwrap();
        let mut ratios: Vec<f64> = (0..9)
            .map(|seed| {
                let small = estimate_orthant(&p, &make_crn(seed, 1000, 3).unwrap()).unwrap();
                let big = estimate_orthant(&p, &make_crn(seed + 100, 4000, 3).unwrap()).unwrap();
                big.std_error / small.std_error
            })
            .collect();
        ratios.sort_by(f64::total_cmp);
        assert!(ratios[4] < 1.0);
    }

    #[test]
    fn deterministic_and_ratio_zero() {
        let p = OrthantProblem::new(vec![0.1, 0.0, -0.4], &equicorrelated(3, 0.4)).unwrap();
        let crn = make_crn(5, 1000, 3).unwrap();
        let a = estimate_orthant(&p, &crn).unwrap();
        let b = estimate_orthant(&p, &crn).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_orthant_ratio(&p, &p, &crn, &crn).unwrap(), 0.0);
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let p = OrthantProblem::new(vec![0.0; 6], &equicorrelated(6, 0.7)).unwrap();
        let crn = make_crn(9, 1000, 6).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| estimate_orthant(&p, &crn).unwrap());
        let b = four.install(|| estimate_orthant(&p, &crn).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn reordering_keeps_probability() {
        let cov = Matrix::from_rows(&[
            vec![1.0, 0.5, 0.2],
            vec![0.5, 2.0, 0.3],
            vec![0.2, 0.3, 1.5],
        ])
        .unwrap();
        let p = OrthantProblem::new(vec![0.5, -1.0, 0.2], &cov).unwrap();
        let q = p.reordered().unwrap();
        let crn = make_crn(4, 20_000, 3).unwrap();
        let a = estimate_orthant(&p, &crn).unwrap();
        let b = estimate_orthant(&q, &crn).unwrap();
        let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.value() - b.value()).abs() < 4.0 * se);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let p = OrthantProblem::new(vec![0.0; 2], &Matrix::identity(2)).unwrap();
        assert!(estimate_orthant(&p, &make_crn(1, 10, 3).unwrap()).is_err());
    }

    #[test]
    fn single_precision_instance() {
        let cov = equicorrelated(2, 0.5).cast::<f32>();
        let p = OrthantProblem::new(vec![0.0f32; 2], &cov).unwrap();
        let est = estimate_orthant(&p, &make_crn(3, 50_000, 2).unwrap()).unwrap();
        assert!((est.value() - 1.0 / 3.0).abs() < 4.0 * est.std_error + 1e-5);
    }

    #[test]
    fn equicorrelated_quadrature_anchors() {
        assert!((equicorrelated_orthant(2, 0.5, 0.0).unwrap() - 1.0 / 3.0).abs() < 1e-10);
        assert!((equicorrelated_orthant(5, 0.0, 0.0).unwrap() - 1.0 / 32.0).abs() < 1e-10);
        let r: f64 = 0.3;
        let three = 0.125 + 3.0 * r.asin() / (4.0 * std::f64::consts::PI);
        assert!((equicorrelated_orthant(3, r, 0.0).unwrap() - three).abs() < 1e-10);
        assert!((equicorrelated_orthant(4, 1.0, 0.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(equicorrelated_orthant(0, 0.5, 0.0).is_err());
        assert!(equicorrelated_orthant(2, -0.1, 0.0).is_err());
    }
}

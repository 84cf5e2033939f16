//! The CSN random field on a lattice.
//!
//! With correlation matrix `C` the joint law of `(U1, U2)` is Gaussian with
//!
//! ```text
//! E = (μ1, ν1),   Var U1 = σ²C,   Cov(U1, U2) = -γσC,   Var U2 = S = (1-γ²)I + γ²C
//! ```
//!
//! and the field is `X = [U1 | U2 ≤ 0]`. Its density is
//!
//! ```text
//! φ_p(x; μ1, σ²C) · Π_i Φ((γ/σ)(x_i - μ) - ν; 0, 1-γ²) / Φ_p(0; ν1, S)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::gaussian::cholesky::{cholesky, CholFactor};
use crate::gaussian::correlation::{exp_correlation_matrix, CorrelationMatrix};
use crate::gaussian::grid::GridSpec;
use crate::gaussian::normal::{std_cdf, std_log_cdf, std_log_pdf};
use crate::gaussian::mvn_log_pdf;
use crate::linalg::Matrix;
use crate::orthant::{estimate_orthant, make_crn, CrnStream, OrthantEstimate, OrthantProblem, ShiftPolicy};
use crate::trunc::{build_block_plan, default_max_sets, mh_step, BlockPlan, TruncChainState, DEFAULT_BLOCK};

/// Largest `|γ|` used when assembling covariances.
pub const GAMMA_CLAMP: f64 = 1.0 - 1e-6;

/// Scalar field parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsnParams {
    pub mu: f64,
    pub nu: f64,
    pub sigma2: f64,
    pub gamma: f64,
    pub d_h: f64,
    pub d_v: f64,
}

impl CsnParams {
    pub fn new(mu: f64, nu: f64, sigma2: f64, gamma: f64, d_h: f64, d_v: f64) -> Result<Self> {
        let p = Self {
            mu,
            nu,
            sigma2,
            gamma,
            d_h,
            d_v,
        };
        p.validate()?;
        Ok(p)
    }

    /// `ν = 0`, `d_h = d_v = d`.
    pub fn isotropic(mu: f64, sigma2: f64, gamma: f64, d: f64) -> Result<Self> {
        Self::new(mu, 0.0, sigma2, gamma, d, d)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.mu, self.nu, self.gamma].iter().all(|v| v.is_finite()) {
            return domain("mu, nu and gamma must be finite");
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return domain(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        if !(self.d_h >= 0.0 && self.d_v >= 0.0) || !self.d_h.is_finite() || !self.d_v.is_finite() {
            return domain(format!("ranges must be nonnegative, got ({}, {})", self.d_h, self.d_v));
        }
        Ok(())
    }

    /// `γ` limited to `|γ| ≤ 1 - 1e-6`, and whether the limit was applied.
    pub fn clamped_gamma(&self) -> (f64, bool) {
        if self.gamma.abs() > GAMMA_CLAMP {
            (GAMMA_CLAMP.copysign(self.gamma), true)
        } else {
            (self.gamma, false)
        }
    }
}

/// Parameters of the six simulation cases (ranges in lattice steps).
pub fn case_params(case_id: u32) -> Result<CsnParams> {
    let base = CsnParams {
        mu: 0.0,
        nu: 0.0,
        sigma2: 1.0,
        gamma: 0.975,
        d_h: 3.0,
        d_v: 3.0,
    };
    Ok(match case_id {
        1 => base,
        2 => CsnParams { d_h: 0.0, d_v: 0.0, ..base },
        3 => CsnParams { d_h: 5.0, d_v: 5.0, ..base },
        4 => CsnParams { gamma: 0.995, ..base },
        5 => CsnParams { nu: 2.0, ..base },
        6 => CsnParams { d_h: 5.0, d_v: 0.0, ..base },
        _ => return domain(format!("case id must be 1..=6, got {case_id}")),
    })
}

/// Assembled covariance blocks for one parameter set on one grid.
#[derive(Debug, Clone)]
pub struct CsnFieldModel {
    params: CsnParams,
    grid: GridSpec,
    gamma: f64,
    gamma_clamped: bool,
    corr: CorrelationMatrix<f64>,
    chol_c: CholFactor<f64>,
    latent_cov: Matrix<f64>,
    latent_chol: CholFactor<f64>,
    shift: ShiftPolicy,
}

/// Builds `C`, `S = (1-γ²)I + γ²C` and their factors.
pub fn build_model(params: CsnParams, grid: &GridSpec) -> Result<CsnFieldModel> {
    params.validate()?;
    let (gamma, gamma_clamped) = params.clamped_gamma();
    let corr = exp_correlation_matrix(grid, params.d_h, params.d_v)?;
    let chol_c = cholesky(corr.as_matrix()).map_err(|e| Error::Parameterization(format!("correlation: {e}")))?;
    let g2 = gamma * gamma;
    let mut latent_cov = corr.as_matrix().scale(g2);
    latent_cov.add_diag(1.0 - g2);
    let latent_chol =
        cholesky(&latent_cov).map_err(|e| Error::Parameterization(format!("latent covariance: {e}")))?;
    // Schur complement of Var U1 in the joint covariance is (1-γ²)I
    if !(1.0 - g2 > 0.0) {
        return Err(Error::Parameterization(format!("|gamma| = {} leaves no latent noise", gamma.abs())));
    }
    Ok(CsnFieldModel {
        params,
        grid: *grid,
        gamma,
        gamma_clamped,
        corr,
        chol_c,
        latent_cov,
        latent_chol,
        shift: ShiftPolicy::Conditional,
    })
}

impl CsnFieldModel {
    pub fn params(&self) -> &CsnParams {
        &self.params
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.len()
    }

    /// `γ` after clamping.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn gamma_clamped(&self) -> bool {
        self.gamma_clamped
    }

    pub fn corr(&self) -> &CorrelationMatrix<f64> {
        &self.corr
    }

    pub fn chol_c(&self) -> &CholFactor<f64> {
        &self.chol_c
    }

    pub fn latent_cov(&self) -> &Matrix<f64> {
        &self.latent_cov
    }

    pub fn latent_chol(&self) -> &CholFactor<f64> {
        &self.latent_chol
    }

    /// `-γσC`.
    pub fn cross_cov(&self) -> Matrix<f64> {
        self.corr.as_matrix().scale(-self.gamma * self.params.sigma2.sqrt())
    }

    pub fn shift_policy(&self) -> ShiftPolicy {
        self.shift
    }

    pub fn with_shift_policy(mut self, shift: ShiftPolicy) -> Self {
        self.shift = shift;
        self
    }

    /// `Φ_p(0; ν1, S)` by importance sampling with `crn`.
    pub fn log_orthant_normalizer(&self, crn: &CrnStream) -> Result<OrthantEstimate> {
        let shift = self.shift.shift(&self.latent_cov, &self.latent_chol)?;
        let problem = OrthantProblem::with_shift(vec![self.params.nu; self.dim()], self.latent_chol.clone(), shift)?;
        estimate_orthant(&problem, crn)
    }

    /// `log φ_p(x; μ1, σ²C)`.
    pub fn gaussian_log_pdf(&self, x: &[f64]) -> Result<f64> {
        let s = self.params.sigma2.sqrt();
        let z: Vec<f64> = x.iter().map(|&v| (v - self.params.mu) / s).collect();
        let zero = vec![0.0; z.len()];
        Ok(mvn_log_pdf(&z, &zero, &self.chol_c)? - 0.5 * x.len() as f64 * self.params.sigma2.ln())
    }

    /// `Σ_i log Φ((γ/σ)(x_i - μ) - ν; 0, 1-γ²)`.
    pub fn log_skew_terms(&self, x: &[f64]) -> f64 {
        let (g, s) = (self.gamma, self.params.sigma2.sqrt());
        let scale = (1.0 - g * g).sqrt();
        x.iter()
            .map(|&v| std_log_cdf((g / s * (v - self.params.mu) - self.params.nu) / scale))
            .sum()
    }
}

/// Log density at `x`; the orthant normalizer is estimated with `crn`.
/// For `γ = 0` the skew terms cancel the normalizer and the Gaussian
/// log density is returned without Monte Carlo.
pub fn csn_logpdf(x: &[f64], model: &CsnFieldModel, crn: &CrnStream) -> Result<f64> {
    if x.len() != model.dim() {
        return shape(format!("field of length {} for a model of {} sites", x.len(), model.dim()));
    }
    let gauss = model.gaussian_log_pdf(x)?;
    if model.gamma == 0.0 {
        return Ok(gauss);
    }
    let norm = model.log_orthant_normalizer(crn)?;
    Ok(gauss + model.log_skew_terms(x) - norm.log_value)
}

/// Settings of the latent chain used for one realization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Block size, capped at the number of sites.
    pub n_a: usize,
    /// Number of blocks; `None` gives `⌈p/n_a⌉·4`.
    pub max_sets: Option<usize>,
    /// Block updates per block before the state is taken.
    pub updates_per_set: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_a: DEFAULT_BLOCK,
            max_sets: None,
            updates_per_set: 40,
        }
    }
}

/// One simulated field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRealization {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub seed: u64,
    pub acceptance_rate: f64,
    pub n_steps: u64,
}

/// Reusable simulator: the latent block plan is built once.
#[derive(Debug, Clone)]
pub struct FieldSampler {
    model: CsnFieldModel,
    plan: Option<BlockPlan>,
    config: SimConfig,
}

impl FieldSampler {
    pub fn new(model: CsnFieldModel, config: SimConfig) -> Result<Self> {
        let p = model.dim();
        let plan = if model.gamma == 0.0 {
            None
        } else {
            let n_a = config.n_a.clamp(1, p);
            let max_sets = config.max_sets.unwrap_or_else(|| default_max_sets(p, n_a));
            Some(build_block_plan(&model.latent_cov, n_a, max_sets)?)
        };
        Ok(Self { model, plan, config })
    }

    pub fn model(&self) -> &CsnFieldModel {
        &self.model
    }

    pub fn plan(&self) -> Option<&BlockPlan> {
        self.plan.as_ref()
    }

    /// Latent draw `U2 | U2 ≤ 0` with the chain's acceptance statistics.
    pub fn sample_latent<R: Rng>(&self, rng: &mut R) -> Result<(Vec<f64>, f64, u64)> {
        let plan = self.plan.as_ref().ok_or_else(|| Error::Domain("no latent field when gamma = 0".into()))?;
        let mean = vec![self.model.params.nu; self.model.dim()];
        let mut state = TruncChainState::new(plan, &mean)?;
        let steps = self.config.updates_per_set.max(1) * plan.sets().len();
        for _ in 0..steps {
            mh_step(plan, &mut state, rng);
        }
        Ok((state.x().to_vec(), state.acceptance_rate(), state.step_count))
    }

    /// Draws `U1 | U2 = u2` by correcting an unconditional joint draw.
    pub fn conditional_field<R: Rng>(&self, u2: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let m = &self.model;
        let p = m.dim();
        let (g, s) = (m.gamma, m.params.sigma2.sqrt());
        let z1: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let z2: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let lz = m.chol_c.mul_lower(&z1)?;
        let a = (1.0 - g * g).sqrt();
        // U2* = ν - γ L z1 + sqrt(1-γ²) z2 has Var S and Cov(U1*, U2*) = -γσC
        let resid: Vec<f64> = (0..p).map(|i| u2[i] - (m.params.nu - g * lz[i] + a * z2[i])).collect();
        let w = m.latent_chol.solve(&resid)?;
        let cw = m.corr.as_matrix().matvec(&w)?;
        Ok((0..p).map(|i| m.params.mu + s * lz[i] - g * s * cw[i]).collect())
    }

    pub fn simulate(&self, seed: u64) -> Result<FieldRealization> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = &self.model;
        if m.gamma == 0.0 {
            let z: Vec<f64> = (0..m.dim()).map(|_| rng.sample(StandardNormal)).collect();
            let s = m.params.sigma2.sqrt();
            let values = m.chol_c.mul_lower(&z)?.into_iter().map(|v| m.params.mu + s * v).collect();
            return Ok(FieldRealization {
                grid: m.grid,
                values,
                seed,
                acceptance_rate: 1.0,
                n_steps: 0,
            });
        }
        let (u2, acceptance_rate, n_steps) = self.sample_latent(&mut rng)?;
        let values = self.conditional_field(&u2, &mut rng)?;
        Ok(FieldRealization {
            grid: m.grid,
            values,
            seed,
            acceptance_rate,
            n_steps,
        })
    }
}

/// One realization with a fresh sampler.
pub fn simulate_field(model: &CsnFieldModel, seed: u64, config: SimConfig) -> Result<FieldRealization> {
    FieldSampler::new(model.clone(), config)?.simulate(seed)
}

/// Monte Carlo estimate of a marginal density value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Density of `X_j` at `x_j`: the Gaussian marginal times the average of the
/// other sites' skew terms under `x_{-j} | x_j`, over the orthant normalizer.
pub fn marginal_density_mc(x_j: f64, j: usize, model: &CsnFieldModel, n_mc: usize, seed: u64) -> Result<DensityEstimate> {
    let p = model.dim();
    if j >= p {
        return domain(format!("site {j} out of range for {p} sites"));
    }
    if n_mc < 2 {
        return domain("n_mc must be at least 2");
    }
    let prm = &model.params;
    let s = prm.sigma2.sqrt();
    let base = std_log_pdf((x_j - prm.mu) / s).exp() / s;
    if model.gamma == 0.0 {
        return Ok(DensityEstimate { value: base, std_error: 0.0 });
    }
    let (g, a) = (model.gamma, (1.0 - model.gamma * model.gamma).sqrt());
    let skew = |v: f64| std_cdf((g / s * (v - prm.mu) - prm.nu) / a);
    let own = skew(x_j);
    if p == 1 {
        let value = base * own / std_cdf(-prm.nu);
        return Ok(DensityEstimate { value, std_error: 0.0 });
    }
    let others: Vec<usize> = (0..p).filter(|&i| i != j).collect();
    let c = model.corr.as_matrix();
    let c_oj: Vec<f64> = others.iter().map(|&i| c[(i, j)]).collect();
    let mut cond = c.select(&others, &others);
    for (r, &ci) in c_oj.iter().enumerate() {
        for (t, &ct) in c_oj.iter().enumerate() {
            cond[(r, t)] -= ci * ct;
        }
    }
    let cond = cond.scale(prm.sigma2);
    let lc = cholesky(&cond)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let z: Vec<f64> = (0..p - 1).map(|_| rng.sample(StandardNormal)).collect();
        let dz = lc.mul_lower(&z)?;
        let prod: f64 = (0..p - 1)
            .map(|r| skew(prm.mu + c_oj[r] * (x_j - prm.mu) + dz[r]))
            .product();
        vals.push(prod);
    }
    let n = n_mc as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let crn = make_crn(seed ^ 0x9e37_79b9_7f4a_7c15, n_mc, p)?;
    let norm = model.log_orthant_normalizer(&crn)?;
    let scale = base * own / norm.value();
    let value = scale * mean;
    let rel_norm = norm.log_scale_se();
    let std_error = (scale * scale * var / n + (value * rel_norm).powi(2)).sqrt();
    Ok(DensityEstimate { value, std_error })
}

/// Pooled sample moments with jackknife standard errors over realizations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledMoments {
    pub n_values: usize,
    pub mean: f64,
    pub variance: f64,
    /// Adjusted Fisher-Pearson skewness; `None` when the variance is zero.
    pub skewness: Option<f64>,
    pub mean_se: f64,
    pub variance_se: f64,
    pub skewness_se: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct PowerSums {
    n: f64,
    s1: f64,
    s2: f64,
    s3: f64,
}

impl PowerSums {
    fn add(&mut self, o: &PowerSums) {
        self.n += o.n;
        self.s1 += o.s1;
        self.s2 += o.s2;
        self.s3 += o.s3;
    }

    fn sub(&self, o: &PowerSums) -> PowerSums {
        PowerSums {
            n: self.n - o.n,
            s1: self.s1 - o.s1,
            s2: self.s2 - o.s2,
            s3: self.s3 - o.s3,
        }
    }

    /// (mean offset, unbiased variance, adjusted skewness) of the shifted data.
    fn moments(&self) -> (f64, f64, Option<f64>) {
        let n = self.n;
        let m = self.s1 / n;
        let m2 = (self.s2 / n - m * m).max(0.0);
        let m3 = self.s3 / n - 3.0 * m * self.s2 / n + 2.0 * m * m * m;
        let var = m2 * n / (n - 1.0);
        let tol = 1e-13 * (self.s2 / n).max(f64::MIN_POSITIVE);
        let skew = if m2 > tol && n > 2.0 {
            Some(m3 / m2.powf(1.5) * (n * (n - 1.0)).sqrt() / (n - 2.0))
        } else {
            None
        };
        (m, var, skew)
    }
}

/// Moments of the values at `sites` pooled over all realizations.
pub fn empirical_moments(samples: &[FieldRealization], sites: &[usize]) -> Result<PooledMoments> {
    if sites.is_empty() {
        return domain("site set is empty");
    }
    if samples.len() < 2 {
        return domain("need at least two realizations");
    }
    for r in samples {
        if let Some(&bad) = sites.iter().find(|&&i| i >= r.values.len()) {
            return domain(format!("site {bad} outside a field of {} values", r.values.len()));
        }
    }
    let center = samples[0].values[sites[0]];
    let per: Vec<PowerSums> = samples
        .iter()
        .map(|r| {
            let mut ps = PowerSums::default();
            for &i in sites {
                let d = r.values[i] - center;
                ps.n += 1.0;
                ps.s1 += d;
                ps.s2 += d * d;
                ps.s3 += d * d * d;
            }
            ps
        })
        .collect();
    let mut total = PowerSums::default();
    for ps in &per {
        total.add(ps);
    }
    let (m, var, skew) = total.moments();
    let k = per.len() as f64;
    let loo: Vec<(f64, f64, Option<f64>)> = per.iter().map(|ps| total.sub(ps).moments()).collect();
    let jack = |vals: &[f64]| {
        let mean = vals.iter().sum::<f64>() / k;
        ((k - 1.0) / k * vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sqrt()
    };
    let mean_se = jack(&loo.iter().map(|t| t.0).collect::<Vec<_>>());
    let variance_se = jack(&loo.iter().map(|t| t.1).collect::<Vec<_>>());
    let skewness_se = if skew.is_some() && loo.iter().all(|t| t.2.is_some()) {
        Some(jack(&loo.iter().map(|t| t.2.unwrap_or(0.0)).collect::<Vec<_>>()))
    } else {
        None
    };
    Ok(PooledMoments {
        n_values: total.n as usize,
        mean: center + m,
        variance: var,
        skewness: skew,
        mean_se,
        variance_se,
        skewness_se,
    })
}

/// Skewness of `[U1 | U2 ≤ 0]` for a single site: a skew-normal with
/// `δ = γ`.
pub fn single_site_skewness(gamma: f64) -> f64 {
    let b = gamma * (2.0 / std::f64::consts::PI).sqrt();
    0.5 * (4.0 - std::f64::consts::PI) * b.powi(3) / (1.0 - b * b).powf(1.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::normal::std_pdf;

    fn model(params: CsnParams, rows: usize, cols: usize) -> CsnFieldModel {
        build_model(params, &GridSpec::unit(rows, cols).unwrap()).unwrap()
    }

    #[test]
    fn cases() {
        assert_eq!(case_params(1).unwrap(), CsnParams::new(0.0, 0.0, 1.0, 0.975, 3.0, 3.0).unwrap());
        assert_eq!(case_params(2).unwrap().d_h, 0.0);
        assert_eq!(case_params(3).unwrap().d_v, 5.0);
        assert_eq!(case_params(4).unwrap().gamma, 0.995);
        assert_eq!(case_params(5).unwrap().nu, 2.0);
        let c6 = case_params(6).unwrap();
        assert_eq!((c6.d_h, c6.d_v), (5.0, 0.0));
        assert!(case_params(7).is_err());
        assert!(case_params(0).is_err());
    }

    #[test]
    fn gaussian_limit_blocks() {
        let m = model(CsnParams::isotropic(0.0, 2.0, 0.0, 3.0).unwrap(), 3, 3);
        assert_eq!(m.latent_cov(), &Matrix::identity(9));
        assert!(m.cross_cov().max_abs() == 0.0);
    }

    #[test]
    fn white_noise_latent_is_identity() {
        let m = model(case_params(2).unwrap(), 4, 4);
        assert_eq!(m.latent_cov(), &Matrix::identity(16));
    }

    #[test]
    fn base_case_builds_on_fifty_grid() {
        let m = model(case_params(1).unwrap(), 50, 50);
        assert_eq!(m.dim(), 2500);
        let c = m.corr().as_matrix();
        let g2 = 0.975f64.powi(2);
        for i in [0, 1, 777, 2499] {
            let want = g2 * c[(i, 1)] + if i == 1 { 1.0 - g2 } else { 0.0 };
            assert!((m.latent_cov()[(i, 1)] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn gamma_is_clamped_at_boundary() {
        let p = CsnParams::isotropic(0.0, 1.0, -1.0, 2.0).unwrap();
        let m = model(p, 2, 2);
        assert!(m.gamma_clamped());
        assert_eq!(m.gamma(), -GAMMA_CLAMP);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(CsnParams::new(0.0, 0.0, 0.0, 0.5, 1.0, 1.0).is_err());
        assert!(CsnParams::new(0.0, 0.0, 1.0, 0.5, -1.0, 1.0).is_err());
        assert!(CsnParams::new(f64::NAN, 0.0, 1.0, 0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn logpdf_gaussian_limit_is_exact() {
        let m = model(CsnParams::new(0.3, 1.0, 1.7, 0.0, 2.0, 1.0).unwrap(), 3, 4);
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).cos()).collect();
        let crn = make_crn(1, 10, 12).unwrap();
        let got = csn_logpdf(&x, &m, &crn).unwrap();
        let chol = cholesky(&m.corr().as_matrix().scale(1.7)).unwrap();
        let want = mvn_log_pdf(&x, &[0.3; 12], &chol).unwrap();
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn univariate_logpdf_value() {
        let m = model(CsnParams::new(0.0, 0.0, 1.0, 0.975, 3.0, 3.0).unwrap(), 1, 1);
        let crn = make_crn(1, 100, 1).unwrap();
        let got = csn_logpdf(&[0.5], &m, &crn).unwrap();
        let want = (std_pdf(0.5) * std_cdf(0.4875 / 0.049375f64.sqrt()) / 0.5).ln();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn univariate_density_integrates_to_one() {
        let m = model(CsnParams::new(0.4, 0.3, 2.0, -0.8, 1.0, 1.0).unwrap(), 1, 1);
        let crn = make_crn(1, 10, 1).unwrap();
        let h = 1e-3;
        let total: f64 = (-15_000..15_000)
            .map(|k| csn_logpdf(&[0.4 + (k as f64 + 0.5) * h], &m, &crn).unwrap().exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn marginal_density_limits() {
        let g = model(CsnParams::isotropic(0.5, 2.0, 0.0, 2.0).unwrap(), 2, 2);
        let d = marginal_density_mc(1.0, 1, &g, 100, 1).unwrap();
        assert!((d.value - std_pdf(0.5 / 2f64.sqrt()) / 2f64.sqrt()).abs() < 1e-14);
        let one = model(CsnParams::new(0.0, 0.0, 1.0, 0.975, 3.0, 3.0).unwrap(), 1, 1);
        let d = marginal_density_mc(0.5, 0, &one, 100, 1).unwrap();
        let want = std_pdf(0.5) * std_cdf(0.4875 / 0.049375f64.sqrt()) / 0.5;
        assert!((d.value - want).abs() < 1e-12);
        assert!(marginal_density_mc(0.5, 1, &one, 100, 1).is_err());
    }

    #[test]
    fn gaussian_simulation_has_no_chain() {
        let m = model(CsnParams::isotropic(1.0, 1.0, 0.0, 2.0).unwrap(), 3, 3);
        let r = simulate_field(&m, 3, SimConfig::default()).unwrap();
        assert_eq!(r.values.len(), 9);
        assert_eq!(r.n_steps, 0);
        assert_eq!(r, simulate_field(&m, 3, SimConfig::default()).unwrap());
    }

    #[test]
    fn moments_of_constant_samples() {
        let grid = GridSpec::unit(2, 2).unwrap();
        let r = |seed| FieldRealization {
            grid,
            values: vec![1.5; 4],
            seed,
            acceptance_rate: 1.0,
            n_steps: 0,
        };
        let m = empirical_moments(&[r(1), r(2), r(3)], &[0, 1, 2, 3]).unwrap();
        assert_eq!(m.variance, 0.0);
        assert_eq!(m.skewness, None);
        assert_eq!(m.mean, 1.5);
        assert!(empirical_moments(&[r(1), r(2)], &[]).is_err());
        assert!(empirical_moments(&[r(1)], &[0]).is_err());
    }

    #[test]
    fn skewness_formula_matches_known_values() {
        assert_eq!(single_site_skewness(0.0), 0.0);
        // limit of the skew-normal skewness as δ → 1
        assert!((single_site_skewness(1.0) - 0.995_271_746_431_156).abs() < 1e-12);
    }
}

//! Monte Carlo maximum likelihood for `(μ, σ², γ, d)` from one realization.
//!
//! The orthant term `log Φ_p(0; ν1, (1-γ²)I + γ²C)` is estimated with a
//! fixed CRN stream, so the likelihood surface is a smooth deterministic
//! function of the parameters. It depends only on `(γ, d, ν)` and is cached.
//! The Gaussian term uses `C = C_h ⊗ C_v` and needs only 1D factors.

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::field::{CsnParams, FieldRealization, FieldSampler, SimConfig, GAMMA_CLAMP};
use crate::gaussian::cholesky::{cholesky, CholFactor};
use crate::gaussian::correlation::{exp_correlation_1d, exp_correlation_matrix};
use crate::gaussian::grid::GridSpec;
use crate::gaussian::normal::std_log_cdf;
use crate::linalg::Matrix;
use crate::optim::{bfgs, fd_hessian_with_steps, nelder_mead};
use crate::orthant::{estimate_orthant, make_crn, CrnStream, OrthantProblem, ShiftPolicy};

/// `|γ̂|` at or above this is reported as a boundary estimate.
pub const GAMMA_BOUNDARY: f64 = 1.0 - 1e-4;
/// Two-sided 90% standard normal quantile.
pub const Z90: f64 = 1.644_853_626_951_472_2;

const CACHE_LIMIT: usize = 64;

/// Starting-point design. Starts are the crossed grid of all listed values,
/// screened by log-likelihood; the best `n_starts` are optimized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartBox {
    /// Offsets of `μ` in units of the sample standard deviation.
    pub mu_sd_offsets: Vec<f64>,
    /// Multiples of the sample variance.
    pub sigma2_factors: Vec<f64>,
    pub gammas: Vec<f64>,
    pub ranges: Vec<f64>,
}

impl Default for StartBox {
    fn default() -> Self {
        Self {
            mu_sd_offsets: vec![-1.0, 0.0, 1.0],
            sigma2_factors: vec![0.25, 1.0, 4.0],
            gammas: vec![-0.8, 0.0, 0.8],
            ranges: vec![1.0, 3.0, 8.0],
        }
    }
}

impl StartBox {
    fn validate(&self) -> Result<()> {
        if [&self.mu_sd_offsets, &self.sigma2_factors, &self.gammas, &self.ranges]
            .iter()
            .any(|v| v.is_empty())
        {
            return domain("start box lists must be nonempty");
        }
        if self.sigma2_factors.iter().any(|&v| !(v > 0.0))
            || self.ranges.iter().any(|&v| !(v > 0.0))
            || self.gammas.iter().any(|&g| !(g.abs() < 1.0))
        {
            return domain("start box needs sigma2 > 0, d > 0 and |gamma| < 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    pub n_mc: usize,
    pub n_starts: usize,
    pub start_box: StartBox,
    pub simplex_iters: usize,
    pub newton_iters: usize,
    pub crn_seed: u64,
    pub fix_nu_zero: bool,
    pub shift: ShiftPolicy,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            n_mc: 1000,
            n_starts: 3,
            start_box: StartBox::default(),
            simplex_iters: 400,
            newton_iters: 60,
            crn_seed: 1,
            fix_nu_zero: true,
            shift: ShiftPolicy::Conditional,
        }
    }
}

/// Outcome of one optimized start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartOutcome {
    pub start: CsnParams,
    pub loglik: f64,
    pub evaluations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleResult {
    /// `d_h = d_v = d̂`; `ν` is 0 unless freed.
    pub estimates: CsnParams,
    pub loglik: f64,
    /// Names of the free parameters, in Hessian order.
    pub names: Vec<String>,
    /// Log-likelihood Hessian in natural coordinates.
    pub hessian: Vec<Vec<f64>>,
    /// `NaN` when the Hessian is not negative definite.
    pub std_errors: Vec<f64>,
    pub intervals_90: Vec<(f64, f64)>,
    pub start_used: usize,
    pub clamped_gamma: bool,
    pub starts: Vec<StartOutcome>,
}

impl MleResult {
    pub fn natural(&self) -> Vec<f64> {
        natural_vec(&self.estimates, self.names.len() == 5)
    }
}

fn natural_vec(p: &CsnParams, with_nu: bool) -> Vec<f64> {
    let mut v = vec![p.mu, p.sigma2, p.gamma, p.d_h];
    if with_nu {
        v.push(p.nu);
    }
    v
}

fn from_natural(v: &[f64]) -> CsnParams {
    CsnParams {
        mu: v[0],
        nu: v.get(4).copied().unwrap_or(0.0),
        sigma2: v[1],
        gamma: v[2],
        d_h: v[3],
        d_v: v[3],
    }
}

fn to_transformed(p: &CsnParams, with_nu: bool) -> Vec<f64> {
    let g = p.gamma.clamp(-GAMMA_CLAMP, GAMMA_CLAMP);
    let mut v = vec![p.mu, p.sigma2.ln(), g.atanh(), p.d_h.ln()];
    if with_nu {
        v.push(p.nu);
    }
    v
}

fn from_transformed(t: &[f64]) -> CsnParams {
    let tmax = GAMMA_CLAMP.atanh();
    let d = t[3].exp();
    CsnParams {
        mu: t[0],
        nu: t.get(4).copied().unwrap_or(0.0),
        sigma2: t[1].exp(),
        gamma: t[2].clamp(-tmax, tmax).tanh(),
        d_h: d,
        d_v: d,
    }
}

struct AxisFactors {
    l_h: CholFactor<f64>,
    l_v: CholFactor<f64>,
    log_det: f64,
    /// `xᵀC⁻¹x`, `1ᵀC⁻¹x`, `1ᵀC⁻¹1`.
    quad: (f64, f64, f64),
}

/// Cached Monte Carlo log-likelihood of one realization.
pub struct LogLikelihood {
    grid: GridSpec,
    x: Vec<f64>,
    crn: CrnStream,
    shift: ShiftPolicy,
    gauss: Mutex<HashMap<(u64, u64), std::sync::Arc<AxisFactors>>>,
    orthant: Mutex<HashMap<(u64, u64, u64, u64), f64>>,
    last_failure: Mutex<Option<String>>,
}

/// Whitens a column-major field with `L_h⁻¹ ⊗ L_v⁻¹`.
fn kron_whiten(l_h: &CholFactor<f64>, l_v: &CholFactor<f64>, x: &[f64]) -> Result<Vec<f64>> {
    let (nr, nc) = (l_v.dim(), l_h.dim());
    let mut cols = Vec::with_capacity(nr * nc);
    for c in 0..nc {
        cols.extend(l_v.solve_lower(&x[c * nr..(c + 1) * nr])?);
    }
    let mut out = vec![0.0; nr * nc];
    let mut row = vec![0.0; nc];
    for r in 0..nr {
        for c in 0..nc {
            row[c] = cols[c * nr + r];
        }
        let w = l_h.solve_lower(&row)?;
        for c in 0..nc {
            out[c * nr + r] = w[c];
        }
    }
    Ok(out)
}

impl LogLikelihood {
    pub fn new(x: &FieldRealization, crn: CrnStream, shift: ShiftPolicy) -> Result<Self> {
        if x.values.len() != x.grid.len() {
            return shape(format!("{} values on a grid of {} sites", x.values.len(), x.grid.len()));
        }
        if crn.dim() != x.grid.len() {
            return shape(format!("CRN dimension {} for {} sites", crn.dim(), x.grid.len()));
        }
        if x.values.iter().any(|v| !v.is_finite()) {
            return domain("field contains non-finite values");
        }
        Ok(Self {
            grid: x.grid,
            x: x.values.clone(),
            crn,
            shift,
            gauss: Mutex::new(HashMap::new()),
            orthant: Mutex::new(HashMap::new()),
            last_failure: Mutex::new(None),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.x
    }

    /// Message of the most recent evaluation that returned `-∞`.
    pub fn last_failure(&self) -> Option<String> {
        self.last_failure.lock().ok().and_then(|g| g.clone())
    }

    fn axis_factors(&self, d_h: f64, d_v: f64) -> Result<std::sync::Arc<AxisFactors>> {
        let key = (d_h.to_bits(), d_v.to_bits());
        if let Some(f) = self.gauss.lock().expect("cache lock").get(&key) {
            return Ok(f.clone());
        }
        let g = &self.grid;
        let l_h = cholesky(exp_correlation_1d(g.n_cols, g.spacing_h, d_h)?.as_matrix())?;
        let l_v = cholesky(exp_correlation_1d(g.n_rows, g.spacing_v, d_v)?.as_matrix())?;
        let log_det = g.n_rows as f64 * l_h.log_det() + g.n_cols as f64 * l_v.log_det();
        let wx = kron_whiten(&l_h, &l_v, &self.x)?;
        let w1 = kron_whiten(&l_h, &l_v, &vec![1.0; self.x.len()])?;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
        let quad = (dot(&wx, &wx), dot(&w1, &wx), dot(&w1, &w1));
        let f = std::sync::Arc::new(AxisFactors { l_h, l_v, log_det, quad });
        let mut cache = self.gauss.lock().expect("cache lock");
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, f.clone());
        Ok(f)
    }

    /// `log Φ_p(0; ν1, (1-γ²)I + γ²C)`.
    pub fn log_orthant_term(&self, gamma: f64, d_h: f64, d_v: f64, nu: f64) -> Result<f64> {
        let key = (gamma.to_bits(), d_h.to_bits(), d_v.to_bits(), nu.to_bits());
        if let Some(&v) = self.orthant.lock().expect("cache lock").get(&key) {
            return Ok(v);
        }
        let p = self.x.len();
        let v = if gamma == 0.0 {
            // independent coordinates
            p as f64 * std_log_cdf(-nu)
        } else {
            let g2 = gamma * gamma;
            let mut s = exp_correlation_matrix(&self.grid, d_h, d_v)?.into_matrix().scale(g2);
            s.add_diag(1.0 - g2);
            let chol = cholesky(&s)?;
            let shift = self.shift.shift(&s, &chol)?;
            let problem = OrthantProblem::with_shift(vec![nu; p], chol, shift)?;
            estimate_orthant(&problem, &self.crn)?.log_value
        };
        let mut cache = self.orthant.lock().expect("cache lock");
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, v);
        Ok(v)
    }

    /// Gaussian log density `log φ_p(x; μ1, σ²C)`.
    pub fn gaussian_term(&self, mu: f64, sigma2: f64, d_h: f64, d_v: f64) -> Result<f64> {
        let f = self.axis_factors(d_h, d_v)?;
        let (a, b, c) = f.quad;
        let q = (a - 2.0 * mu * b + mu * mu * c) / sigma2;
        let p = self.x.len() as f64;
        Ok(-0.5 * (p * (2.0 * std::f64::consts::PI * sigma2).ln() + f.log_det + q))
    }

    pub fn try_eval(&self, params: &CsnParams) -> Result<f64> {
        params.validate()?;
        let (gamma, _) = params.clamped_gamma();
        let gauss = self.gaussian_term(params.mu, params.sigma2, params.d_h, params.d_v)?;
        if gamma == 0.0 {
            return Ok(gauss);
        }
        let s = params.sigma2.sqrt();
        let a = (1.0 - gamma * gamma).sqrt();
        let skew: f64 = self
            .x
            .iter()
            .map(|&v| std_log_cdf((gamma / s * (v - params.mu) - params.nu) / a))
            .sum();
        Ok(gauss + skew - self.log_orthant_term(gamma, params.d_h, params.d_v, params.nu)?)
    }

    /// Log-likelihood, or `-∞` when a factorization fails.
    pub fn eval(&self, params: &CsnParams) -> f64 {
        match self.try_eval(params) {
            Ok(v) if !v.is_nan() => v,
            Ok(_) => {
                self.note_failure("log-likelihood is NaN".into());
                f64::NEG_INFINITY
            }
            Err(e) => {
                self.note_failure(e.to_string());
                f64::NEG_INFINITY
            }
        }
    }

    fn note_failure(&self, msg: String) {
        if let Ok(mut g) = self.last_failure.lock() {
            *g = Some(msg);
        }
    }

    pub fn cholesky_of_axes(&self, d_h: f64, d_v: f64) -> Result<(CholFactor<f64>, CholFactor<f64>)> {
        let f = self.axis_factors(d_h, d_v)?;
        Ok((f.l_h.clone(), f.l_v.clone()))
    }
}

/// One-shot log-likelihood with the orthant term from `crn`.
pub fn mc_loglik(params: &CsnParams, x: &FieldRealization, crn: &CrnStream) -> f64 {
    match LogLikelihood::new(x, crn.clone(), ShiftPolicy::Conditional) {
        Ok(ll) => ll.eval(params),
        Err(_) => f64::NEG_INFINITY,
    }
}

fn sample_moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v)
}

/// Crossed `(γ, d)` starts. For each pair the best `(μ, σ²)` of the box is
/// refined by a simplex over `(μ, log σ²)`, which is cheap because the orthant
/// term is cached per `(γ, d)`.
fn screened_starts(ll: &LogLikelihood, config: &MleConfig) -> Vec<CsnParams> {
    let (m, v) = sample_moments(ll.values());
    let v = if v > 0.0 { v } else { 1.0 };
    let sd = v.sqrt();
    let b = &config.start_box;
    let mut cands = Vec::new();
    for &g in &b.gammas {
        for &d in &b.ranges {
            let at = |mu: f64, sigma2: f64| CsnParams {
                mu,
                nu: 0.0,
                sigma2,
                gamma: g,
                d_h: d,
                d_v: d,
            };
            let mut best = (f64::NEG_INFINITY, at(m, v));
            for &o in &b.mu_sd_offsets {
                for &f in &b.sigma2_factors {
                    let p = at(m + o * sd, f * v);
                    let l = ll.eval(&p);
                    if l > best.0 {
                        best = (l, p);
                    }
                }
            }
            let obj = |t: &[f64]| {
                let l = ll.eval(&at(t[0], t[1].exp()));
                if l.is_finite() {
                    -l
                } else {
                    f64::INFINITY
                }
            };
            if let Ok(r) = nelder_mead(obj, &[best.1.mu, best.1.sigma2.ln()], &[0.5 * sd, 0.5], 200, 1e-6) {
                if -r.fx > best.0 {
                    best = (-r.fx, at(r.x[0], r.x[1].exp()));
                }
            }
            cands.push(best);
        }
    }
    // stable: ties keep design order
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    cands.into_iter().take(config.n_starts.max(1)).map(|c| c.1).collect()
}

fn optimize_from(ll: &LogLikelihood, start: &CsnParams, config: &MleConfig) -> Result<(CsnParams, f64, usize)> {
    let with_nu = !config.fix_nu_zero;
    let objective = |t: &[f64]| -> f64 {
        let v = ll.eval(&from_transformed(t));
        if v.is_finite() {
            -v
        } else {
            f64::INFINITY
        }
    };
    let t0 = to_transformed(start, with_nu);
    let (_, var) = sample_moments(ll.values());
    let mut step = vec![0.5 * var.max(1e-12).sqrt(), 0.5, 0.5, 0.5];
    if with_nu {
        step.push(0.5);
    }
    let nm = nelder_mead(objective, &t0, &step, config.simplex_iters, 1e-6)?;
    let mut evals = nm.evaluations;
    let (mut best_t, mut best_f) = (nm.x, nm.fx);
    if config.newton_iters > 0 && best_f.is_finite() {
        let qn = bfgs(objective, &best_t, config.newton_iters, 1e-4, 1e-4)?;
        evals += qn.evaluations;
        if qn.fx <= best_f {
            best_t = qn.x;
            best_f = qn.fx;
        }
    }
    if !best_f.is_finite() {
        return Err(Error::Optimization(format!(
            "no finite log-likelihood reached from start {start:?}: {}",
            ll.last_failure().unwrap_or_default()
        )));
    }
    Ok((from_transformed(&best_t), -best_f, evals))
}

/// Central-difference Hessian steps in natural coordinates, kept inside the
/// parameter domain.
fn hessian_steps(v: &[f64]) -> Vec<f64> {
    v.iter()
        .enumerate()
        .map(|(k, &x)| {
            let h = 1e-3 * x.abs().max(1.0);
            match k {
                1 | 3 => h.min(0.5 * x),
                2 => h.min(0.5 * (GAMMA_CLAMP - x.abs()).max(1e-9)),
                _ => h,
            }
        })
        .collect()
}

fn finish(
    ll: &LogLikelihood,
    est: CsnParams,
    loglik: f64,
    with_nu: bool,
    start_used: usize,
    starts: Vec<StartOutcome>,
) -> MleResult {
    let nat = natural_vec(&est, with_nu);
    let steps = hessian_steps(&nat);
    let h = fd_hessian_with_steps(|v| ll.eval(&from_natural(v)), &nat, &steps);
    let k = nat.len();
    let neg = h.scale(-1.0);
    let std_errors: Vec<f64> = match cholesky_strict(&neg) {
        Some(c) => {
            let inv = c.inverse();
            (0..k).map(|i| inv[(i, i)].sqrt()).collect()
        }
        None => vec![f64::NAN; k],
    };
    let intervals_90 = nat.iter().zip(&std_errors).map(|(e, s)| (e - Z90 * s, e + Z90 * s)).collect();
    let mut names: Vec<String> = ["mu", "sigma2", "gamma", "d"].iter().map(|s| s.to_string()).collect();
    if with_nu {
        names.push("nu".into());
    }
    MleResult {
        estimates: est,
        loglik,
        names,
        hessian: (0..k).map(|i| h.row(i).to_vec()).collect(),
        std_errors,
        intervals_90,
        start_used,
        clamped_gamma: est.gamma.abs() >= GAMMA_BOUNDARY,
        starts,
    }
}

/// Cholesky without jitter; `None` unless strictly positive definite.
fn cholesky_strict(m: &Matrix<f64>) -> Option<CholFactor<f64>> {
    if m.as_slice().iter().any(|v| !v.is_finite()) {
        return None;
    }
    let c = cholesky(m).ok()?;
    (c.jitter_used() == 0.0).then_some(c)
}

fn check_config(config: &MleConfig) -> Result<()> {
    if config.n_mc == 0 || config.n_starts == 0 || config.simplex_iters == 0 {
        return domain("n_mc, n_starts and simplex_iters must be positive");
    }
    config.start_box.validate()
}

/// Multi-start fit: screen the crossed start design, then simplex and
/// quasi-Newton from the best starts.
pub fn fit(x: &FieldRealization, config: &MleConfig) -> Result<MleResult> {
    check_config(config)?;
    let crn = make_crn(config.crn_seed, config.n_mc, x.grid.len())?;
    let ll = LogLikelihood::new(x, crn, config.shift)?;
    let starts = screened_starts(&ll, config);
    fit_starts(&ll, &starts, config)
}

/// Fit from given starting points only.
pub fn fit_from(x: &FieldRealization, config: &MleConfig, starts: &[CsnParams]) -> Result<MleResult> {
    check_config(config)?;
    if starts.is_empty() {
        return domain("no starting points");
    }
    let crn = make_crn(config.crn_seed, config.n_mc, x.grid.len())?;
    let ll = LogLikelihood::new(x, crn, config.shift)?;
    fit_starts(&ll, starts, config)
}

fn fit_starts(ll: &LogLikelihood, starts: &[CsnParams], config: &MleConfig) -> Result<MleResult> {
    let runs: Vec<Result<(CsnParams, f64, usize)>> = starts.par_iter().map(|s| optimize_from(ll, s, config)).collect();
    let mut outcomes = Vec::with_capacity(starts.len());
    let mut best: Option<(usize, CsnParams, f64)> = None;
    for (i, (s, r)) in starts.iter().zip(runs).enumerate() {
        match r {
            Ok((est, l, n)) => {
                outcomes.push(StartOutcome {
                    start: *s,
                    loglik: l,
                    evaluations: n,
                    error: None,
                });
                if best.as_ref().is_none_or(|b| l > b.2) {
                    best = Some((i, est, l));
                }
            }
            Err(e) => outcomes.push(StartOutcome {
                start: *s,
                loglik: f64::NEG_INFINITY,
                evaluations: 0,
                error: Some(e.to_string()),
            }),
        }
    }
    let Some((i, est, l)) = best else {
        let diag: Vec<String> = outcomes.iter().filter_map(|o| o.error.clone()).collect();
        return Err(Error::Optimization(format!("all starts failed: {}", diag.join("; "))));
    };
    Ok(finish(ll, est, l, !config.fix_nu_zero, i, outcomes))
}

/// One row of a study table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub param: String,
    pub p: usize,
    #[serde(rename = "N")]
    pub n_mc: usize,
    pub rep: usize,
    pub estimate: f64,
    pub se: f64,
}

fn rows_of(res: &MleResult, p: usize, n_mc: usize, rep: usize) -> Vec<StudyRow> {
    res.names
        .iter()
        .zip(res.natural())
        .zip(&res.std_errors)
        .map(|((name, est), &se)| StudyRow {
            param: name.clone(),
            p,
            n_mc,
            rep,
            estimate: est,
            se,
        })
        .collect()
}

/// Refits one realization with `n_reps` CRN seeds per sample size.
/// Seeds are `config.crn_seed + rep`.
pub fn mc_error_study(x: &FieldRealization, n_list: &[usize], n_reps: usize, config: &MleConfig) -> Result<Vec<StudyRow>> {
    if n_reps < 2 {
        return domain("mc_error_study needs at least two replicates");
    }
    if n_list.is_empty() {
        return domain("empty list of sample sizes");
    }
    let jobs: Vec<(usize, usize)> = n_list.iter().flat_map(|&n| (0..n_reps).map(move |r| (n, r))).collect();
    let fits: Vec<Result<Vec<StudyRow>>> = jobs
        .par_iter()
        .map(|&(n, rep)| {
            let cfg = MleConfig {
                n_mc: n,
                crn_seed: config.crn_seed.wrapping_add(rep as u64),
                ..config.clone()
            };
            fit(x, &cfg).map(|r| rows_of(&r, x.grid.len(), n, rep))
        })
        .collect();
    let mut out = Vec::new();
    for f in fits {
        out.extend(f?);
    }
    Ok(out)
}

/// Spread (sample standard deviation over reps) of each parameter per `N`.
pub fn study_spread(rows: &[StudyRow]) -> Vec<(String, usize, f64)> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in rows {
        let k = (r.param.clone(), r.n_mc);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(param, n)| {
            let v: Vec<f64> = rows.iter().filter(|r| r.param == param && r.n_mc == n).map(|r| r.estimate).collect();
            let (_, var) = sample_moments(&v);
            (param, n, var.sqrt())
        })
        .collect()
}

/// Per-parameter summary at one field size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySummary {
    pub p: usize,
    pub param: String,
    pub n_fits: usize,
    pub bias: f64,
    pub sd: f64,
    /// Fraction of intervals containing the truth.
    pub coverage_90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyStudy {
    pub summaries: Vec<ConsistencySummary>,
    /// Fraction of fits with `|γ̂|` at the boundary, per `p`.
    pub clamp_fraction: Vec<(usize, f64)>,
    pub failures: Vec<(usize, usize, String)>,
    pub rows: Vec<StudyRow>,
}

/// Simulates `n_sims` fields per size (square grids, `p` a perfect square)
/// from `truth`, fits each, and summarizes bias, spread and coverage.
/// Simulation `k` at size `p` uses seed `seed + k` and CRN seed
/// `config.crn_seed + k`.
pub fn consistency_study(
    p_list: &[usize],
    n_sims: usize,
    truth: &CsnParams,
    n_mc: usize,
    config: &MleConfig,
    seed: u64,
) -> Result<ConsistencyStudy> {
    if n_sims < 10 {
        return domain("consistency_study needs at least 10 simulations per size");
    }
    truth.validate()?;
    let mut grids = Vec::new();
    for &p in p_list {
        let side = (p as f64).sqrt().round() as usize;
        if side * side != p || p == 0 {
            return domain(format!("field size {p} is not a positive perfect square"));
        }
        grids.push(GridSpec::unit(side, side)?);
    }
    let mut summaries = Vec::new();
    let mut clamp_fraction = Vec::new();
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    for grid in grids {
        let p = grid.len();
        let model = crate::field::build_model(*truth, &grid)?;
        let sampler = FieldSampler::new(model, SimConfig::default())?;
        let fits: Vec<Result<MleResult>> = (0..n_sims)
            .into_par_iter()
            .map(|k| {
                let x = sampler.simulate(seed.wrapping_add(k as u64))?;
                let cfg = MleConfig {
                    n_mc,
                    crn_seed: config.crn_seed.wrapping_add(k as u64),
                    ..config.clone()
                };
                fit(&x, &cfg)
            })
            .collect();
        let mut ok = Vec::new();
        for (k, f) in fits.into_iter().enumerate() {
            match f {
                Ok(r) => {
                    rows.extend(rows_of(&r, p, n_mc, k));
                    ok.push(r);
                }
                Err(e) => failures.push((p, k, e.to_string())),
            }
        }
        if ok.is_empty() {
            continue;
        }
        let clamped = ok.iter().filter(|r| r.clamped_gamma).count();
        clamp_fraction.push((p, clamped as f64 / ok.len() as f64));
        let truth_nat = natural_vec(truth, !config.fix_nu_zero);
        for (j, name) in ok[0].names.iter().enumerate() {
            let est: Vec<f64> = ok.iter().map(|r| r.natural()[j]).collect();
            let (m, v) = sample_moments(&est);
            let covered = ok
                .iter()
                .filter(|r| {
                    let (lo, hi) = r.intervals_90[j];
                    lo <= truth_nat[j] && truth_nat[j] <= hi
                })
                .count();
            summaries.push(ConsistencySummary {
                p,
                param: name.clone(),
                n_fits: ok.len(),
                bias: m - truth_nat[j],
                sd: v.sqrt(),
                coverage_90: covered as f64 / ok.len() as f64,
            });
        }
    }
    Ok(ConsistencyStudy {
        summaries,
        clamp_fraction,
        failures,
        rows,
    })
}

//! Bayesian linear inversion with a CSN random-field prior.
//!
//! The property vector `m` is variable-major: all sites of variable 0 in
//! grid site order, then variable 1, and so on. Observations are angle-major
//! in the same way, so a trace is a contiguous run of `n_t` values.
//!
//! The prior is the joint Gaussian of `(U1, U2)` with `m = [U1 | U2 ≤ 0]`;
//! observing `d = G U1 + e` keeps the pair jointly Gaussian, so the
//! posterior is again a pending truncation and is sampled with the block
//! sampler on `U2` followed by exact Gaussian draws of `U1 | U2`.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::gaussian::{
    cholesky, cholesky_nonsingular, conditional_gaussian, conditional_with_factor, exp_correlation_1d,
    exp_correlation_matrix, mvn_log_pdf, GaussianSplit, GridSpec, KroneckerCov,
};
use crate::linalg::Matrix;
use crate::optim::{bfgs, nelder_mead};
use crate::orthant::{estimate_orthant, make_crn, CrnStream, OrthantProblem, ShiftPolicy};
use crate::trunc::{build_block_plan, default_max_sets, mh_step, TruncChainState, DEFAULT_BLOCK};

/// Upper 90% standard normal quantile; `mean ± Z80·sd` is the central 80% band.
pub const Z80: f64 = 1.281_551_565_544_600_5;

const GAMMA_LIMIT: f64 = 1.0 - 1e-6;

/// Wavelet used for the per-trace convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Wavelet {
    /// Ricker wavelet sampled every `dt` seconds out to `±√6/(π f)`.
    Ricker { peak_hz: f64, dt: f64 },
    Delta,
    /// Explicit taps, centered on index `len / 2`.
    Custom { taps: Vec<f64> },
}

impl Default for Wavelet {
    fn default() -> Self {
        Wavelet::Ricker { peak_hz: 25.0, dt: 0.004 }
    }
}

impl Wavelet {
    pub fn kernel(&self) -> Result<Vec<f64>> {
        match self {
            Wavelet::Ricker { peak_hz, dt } => {
                if !(*peak_hz > 0.0 && *dt > 0.0 && peak_hz.is_finite() && dt.is_finite()) {
                    return domain("ricker peak frequency and sampling interval must be positive");
                }
                let a = PI * peak_hz * dt;
                let half = (6f64.sqrt() / a).ceil() as usize;
                Ok((0..=2 * half)
                    .map(|j| {
                        let x = (a * (j as f64 - half as f64)).powi(2);
                        (1.0 - 2.0 * x) * (-x).exp()
                    })
                    .collect())
            }
            Wavelet::Delta => Ok(vec![1.0]),
            Wavelet::Custom { taps } => {
                if taps.is_empty() || taps.iter().any(|v| !v.is_finite()) {
                    return domain("wavelet taps must be nonempty and finite");
                }
                if taps.iter().all(|&v| v == 0.0) {
                    return domain("wavelet taps are all zero");
                }
                Ok(taps.clone())
            }
        }
    }
}

/// Background elastic properties at which the weak-contrast coefficients are
/// evaluated. Only the ratio `vs / vp` enters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub vp: f64,
    pub vs: f64,
    pub rho: f64,
}

impl Default for Background {
    fn default() -> Self {
        Self { vp: 2.6, vs: 1.3, rho: 2.25 }
    }
}

/// Weak-contrast Aki-Richards coefficients `(a_vp, a_vs, a_ρ)` multiplying
/// the contrasts of `(ln vp, ln vs, ln ρ)` at incidence angle `theta_deg`,
/// with `k = vs / vp`.
pub fn aki_richards(theta_deg: f64, k: f64) -> [f64; 3] {
    let t = theta_deg.to_radians();
    let (s2, c2) = (t.sin().powi(2), t.cos().powi(2));
    [0.5 / c2, -4.0 * k * k * s2, 0.5 * (1.0 - 4.0 * k * k * s2)]
}

/// Angles, wavelet and background shared by every forward operator of a survey.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Survey {
    pub n_vars: usize,
    pub angles: Vec<f64>,
    #[serde(default)]
    pub wavelet: Wavelet,
    #[serde(default)]
    pub background: Background,
}

impl Default for Survey {
    fn default() -> Self {
        Self {
            n_vars: 1,
            angles: vec![12.0, 22.0, 31.0],
            wavelet: Wavelet::default(),
            background: Background::default(),
        }
    }
}

impl Survey {
    pub fn forward(&self, grid: &GridSpec) -> Result<ForwardOperator> {
        build_forward(grid, self.n_vars, &self.angles, &self.wavelet, self.background)
    }
}

/// `G = W A D` kept in factored form.
///
/// `D` differences each trace downward (`m[t+1] - m[t]`, last row zero), `A`
/// mixes variables with per-angle coefficients and `W` convolves each trace.
/// With one variable only the `vp` coefficient is used.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOperator {
    n_t: usize,
    n_x: usize,
    n_vars: usize,
    coefs: Vec<[f64; 3]>,
    kernel: Vec<f64>,
}

pub fn build_forward(
    grid: &GridSpec,
    n_vars: usize,
    angles_deg: &[f64],
    wavelet: &Wavelet,
    background: Background,
) -> Result<ForwardOperator> {
    if angles_deg.is_empty() {
        return domain("at least one angle is required");
    }
    if angles_deg.iter().any(|a| !(a.is_finite() && *a >= 0.0 && *a < 90.0)) {
        return domain("angles must lie in [0, 90) degrees");
    }
    if !(background.vp > 0.0 && background.vs > 0.0 && background.rho > 0.0) {
        return domain("background velocities and density must be positive");
    }
    if n_vars != 1 && n_vars != 3 {
        return domain(format!("n_vars must be 1 or 3, got {n_vars}"));
    }
    let k = background.vs / background.vp;
    Ok(ForwardOperator {
        n_t: grid.n_rows,
        n_x: grid.n_cols,
        n_vars,
        coefs: angles_deg.iter().map(|&a| aki_richards(a, k)).collect(),
        kernel: wavelet.kernel()?,
    })
}

impl ForwardOperator {
    pub fn n_angles(&self) -> usize {
        self.coefs.len()
    }

    pub fn rows(&self) -> usize {
        self.n_angles() * self.n_t * self.n_x
    }

    pub fn cols(&self) -> usize {
        self.n_vars * self.n_t * self.n_x
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn coefficients(&self, angle: usize) -> &[f64] {
        &self.coefs[angle][..self.n_vars]
    }

    pub fn apply(&self, m: &[f64]) -> Result<Vec<f64>> {
        if m.len() != self.cols() {
            return shape(format!("forward operator has {} columns, got {}", self.cols(), m.len()));
        }
        let (n_t, s) = (self.n_t, self.n_t * self.n_x);
        let c = self.kernel.len() / 2;
        let mut out = vec![0.0; self.rows()];
        let mut refl = vec![0.0; n_t];
        for (a, coef) in self.coefs.iter().enumerate() {
            for x in 0..self.n_x {
                for (t, r) in refl.iter_mut().enumerate() {
                    *r = if t + 1 < n_t {
                        (0..self.n_vars)
                            .map(|k| coef[k] * (m[k * s + x * n_t + t + 1] - m[k * s + x * n_t + t]))
                            .sum()
                    } else {
                        0.0
                    };
                }
                let dst = &mut out[a * s + x * n_t..][..n_t];
                for (t, o) in dst.iter_mut().enumerate() {
                    for (j, w) in self.kernel.iter().enumerate() {
                        if let Some(tt) = (t + c).checked_sub(j) {
                            if tt < n_t {
                                *o += w * refl[tt];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Matrix<f64> {
        let (n_t, s) = (self.n_t, self.n_t * self.n_x);
        let c = self.kernel.len() / 2;
        let mut g = Matrix::zeros(self.rows(), self.cols());
        for (a, coef) in self.coefs.iter().enumerate() {
            for x in 0..self.n_x {
                for t in 0..n_t {
                    let row = a * s + x * n_t + t;
                    for (j, w) in self.kernel.iter().enumerate() {
                        let Some(tt) = (t + c).checked_sub(j) else { continue };
                        if tt + 1 >= n_t {
                            continue;
                        }
                        for (k, ck) in coef.iter().enumerate().take(self.n_vars) {
                            g[(row, k * s + x * n_t + tt + 1)] += w * ck;
                            g[(row, k * s + x * n_t + tt)] -= w * ck;
                        }
                    }
                }
            }
        }
        g
    }
}

/// `Σ_e = σ²_e · C^w ⊗ C^h ⊗ C^v` over (angle index, trace, time).
pub fn error_cov(sigma2_e: f64, ranges: [f64; 3], n_angles: usize, grid: &GridSpec) -> Result<KroneckerCov<f64>> {
    if !(sigma2_e > 0.0 && sigma2_e.is_finite()) {
        return domain("error variance must be positive");
    }
    if ranges.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return domain("error correlation ranges must be positive");
    }
    if n_angles == 0 {
        return domain("at least one angle is required");
    }
    let cw = exp_correlation_1d(n_angles, 1.0, ranges[0])?.into_matrix();
    let ch = exp_correlation_1d(grid.n_cols, grid.spacing_h, ranges[1])?.into_matrix();
    let cv = exp_correlation_1d(grid.n_rows, grid.spacing_v, ranges[2])?.into_matrix();
    KroneckerCov::new(sigma2_e, vec![cw, ch, cv])
}

/// Form of the latent noise block `Δ = Δ⁰ ⊗ I`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaForm {
    /// `Δ⁰ = I - Γ²`, matching the univariate field.
    #[default]
    OneMinusSquare,
    /// `Δ⁰ = (I - Γ)(I - Γ)`.
    SquaredComplement,
}

/// Stationary CSN prior with `q = p` latent sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub n_vars: usize,
    pub mu0: Vec<f64>,
    pub sigma0: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub d_h: f64,
    pub d_v: f64,
    pub grid: GridSpec,
    #[serde(default)]
    pub delta: DeltaForm,
}

/// Dense blocks of the joint law of `(U1, U2)`; `U2` has mean zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBlocks {
    pub mean: Vec<f64>,
    pub s11: Matrix<f64>,
    pub s12: Matrix<f64>,
    pub s22: Matrix<f64>,
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars;
        if n != 1 && n != 3 {
            return domain(format!("n_vars must be 1 or 3, got {n}"));
        }
        if self.mu0.len() != n || self.gamma.len() != n || self.sigma0.len() != n {
            return shape("mu0, gamma and sigma0 must have n_vars entries");
        }
        if self.sigma0.iter().any(|r| r.len() != n) {
            return shape("sigma0 must be square");
        }
        if self.mu0.iter().any(|v| !v.is_finite()) {
            return domain("mu0 must be finite");
        }
        if self.gamma.iter().any(|g| !(g.abs() < 1.0)) {
            return domain("every gamma must lie in (-1, 1)");
        }
        if !(self.d_h >= 0.0 && self.d_v >= 0.0 && self.d_h.is_finite() && self.d_v.is_finite()) {
            return domain("prior ranges must be finite and nonnegative");
        }
        let s = self.sigma0_matrix()?;
        if !s.is_symmetric(1e-12 * s.max_abs().max(1.0)) {
            return domain("sigma0 is not symmetric");
        }
        if s.diag().iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return domain("sigma0 must have a positive diagonal");
        }
        cholesky(&s).map_err(|e| Error::Parameterization(format!("sigma0: {e}")))?;
        Ok(())
    }

    pub fn sigma0_matrix(&self) -> Result<Matrix<f64>> {
        Matrix::from_rows(&self.sigma0)
    }

    pub fn p(&self) -> usize {
        self.n_vars * self.grid.len()
    }

    /// Same prior on another grid of the same design.
    pub fn on_grid(&self, grid: &GridSpec) -> Result<PriorSpec> {
        if !self.grid.same_design(grid) {
            return Err(Error::Config(format!(
                "prior built for a {}x{} design cannot be used on a {}x{} design",
                self.grid.n_rows, self.grid.n_cols, grid.n_rows, grid.n_cols
            )));
        }
        Ok(PriorSpec { grid: *grid, ..self.clone() })
    }

    pub fn blocks(&self) -> Result<PriorBlocks> {
        self.validate()?;
        let n = self.n_vars;
        let s0 = self.sigma0_matrix()?;
        let c = exp_correlation_matrix(&self.grid, self.d_h, self.d_v)?.into_matrix();
        // Γ⁰Ω⁰ is diagonal
        let go: Vec<f64> = (0..n).map(|k| self.gamma[k] / s0[(k, k)].sqrt()).collect();
        let cross0 = Matrix::from_fn(n, n, |i, j| -s0[(i, j)] * go[j]);
        let lat0 = Matrix::from_fn(n, n, |i, j| go[i] * s0[(i, j)] * go[j]);
        let delta0: Vec<f64> = self
            .gamma
            .iter()
            .map(|g| match self.delta {
                DeltaForm::OneMinusSquare => 1.0 - g * g,
                DeltaForm::SquaredComplement => (1.0 - g) * (1.0 - g),
            })
            .collect();
        let mut s22 = lat0.kron(&c);
        let m = self.grid.len();
        for (k, d) in delta0.iter().enumerate() {
            for i in 0..m {
                s22[(k * m + i, k * m + i)] += d;
            }
        }
        Ok(PriorBlocks {
            mean: self.mu0.iter().flat_map(|&v| std::iter::repeat_n(v, m)).collect(),
            s11: s0.kron(&c),
            s12: cross0.kron(&c),
            s22,
        })
    }

    /// The full `2p × 2p` covariance, materialized.
    pub fn full_cov(&self) -> Result<Matrix<f64>> {
        let b = self.blocks()?;
        Matrix::block2(&b.s11, &b.s12, &b.s12.transpose(), &b.s22)
    }
}

/// `d = G m + e` with `e ~ N(0, Σ_e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearObsModel {
    pub g: Matrix<f64>,
    pub error: KroneckerCov<f64>,
    pub d: Vec<f64>,
}

impl LinearObsModel {
    pub fn new(g: Matrix<f64>, error: KroneckerCov<f64>, d: Vec<f64>) -> Result<Self> {
        if g.rows() != d.len() || error.dim() != d.len() {
            return shape(format!(
                "G has {} rows, Σ_e dim {}, d length {}",
                g.rows(),
                error.dim(),
                d.len()
            ));
        }
        Ok(Self { g, error, d })
    }
}

/// Exactly observed entries of `m` (indices into the variable-major vector).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WellData {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl WellData {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn check(&self, p: usize) -> Result<()> {
        if self.indices.len() != self.values.len() {
            return shape("well indices and values differ in length");
        }
        if let Some(&i) = self.indices.iter().find(|&&i| i >= p) {
            return domain(format!("well index {i} outside a field of {p} values"));
        }
        Ok(())
    }
}

/// All variables along one grid column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellColumn {
    pub col: usize,
    /// Variable-major, `n_vars × n_rows`.
    pub values: Vec<f64>,
}

impl WellColumn {
    pub fn extract(m: &[f64], grid: &GridSpec, n_vars: usize, col: usize) -> Result<Self> {
        if col >= grid.n_cols || m.len() != n_vars * grid.len() {
            return shape("well column outside the grid or field length mismatch");
        }
        let idx = column_indices(grid, n_vars, col);
        Ok(Self {
            col,
            values: idx.iter().map(|&i| m[i]).collect(),
        })
    }

    pub fn well_data(&self, grid: &GridSpec, n_vars: usize) -> Result<WellData> {
        if self.col >= grid.n_cols {
            return domain(format!("well column {} outside {} columns", self.col, grid.n_cols));
        }
        let indices = column_indices(grid, n_vars, self.col);
        if indices.len() != self.values.len() {
            return shape(format!("well needs {} values, got {}", indices.len(), self.values.len()));
        }
        Ok(WellData {
            indices,
            values: self.values.clone(),
        })
    }
}

fn column_indices(grid: &GridSpec, n_vars: usize, col: usize) -> Vec<usize> {
    (0..n_vars)
        .flat_map(|k| grid.column(col).into_iter().map(move |i| k * grid.len() + i))
        .collect()
}

/// Gaussian law of `(U1, U2)` given the data, truncation `U2 ≤ 0` pending.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorCsn {
    pub mean_u1: Vec<f64>,
    pub cov_u1: Matrix<f64>,
    pub mean_u2: Vec<f64>,
    pub cov_u2: Matrix<f64>,
    /// `Cov(U1, U2)`, `p × q`.
    pub cross: Matrix<f64>,
    /// Entries of `U1` held exactly at their mean.
    pub fixed: Vec<usize>,
}

impl PosteriorCsn {
    /// The prior itself, before any data.
    pub fn from_prior(prior: &PriorSpec) -> Result<Self> {
        let b = prior.blocks()?;
        let q = b.s22.rows();
        Ok(Self {
            mean_u1: b.mean,
            cov_u1: b.s11,
            mean_u2: vec![0.0; q],
            cov_u2: b.s22,
            cross: b.s12,
            fixed: Vec::new(),
        })
    }

    pub fn p(&self) -> usize {
        self.mean_u1.len()
    }

    pub fn q(&self) -> usize {
        self.mean_u2.len()
    }

    pub fn joint_cov(&self) -> Result<Matrix<f64>> {
        Matrix::block2(&self.cov_u1, &self.cross, &self.cross.transpose(), &self.cov_u2)
    }

    fn from_joint(mean: Vec<f64>, cov: Matrix<f64>, p: usize, fixed: Vec<usize>) -> Self {
        let n = mean.len();
        let (a, b): (Vec<usize>, Vec<usize>) = ((0..p).collect(), (p..n).collect());
        Self {
            mean_u1: mean[..p].to_vec(),
            mean_u2: mean[p..].to_vec(),
            cov_u1: cov.select(&a, &a),
            cov_u2: cov.select(&b, &b),
            cross: cov.select(&a, &b),
            fixed,
        }
    }
}

/// Conditions the prior's `(U1, U2)` on `d`.
pub fn posterior_csn(prior: &PriorSpec, obs: &LinearObsModel) -> Result<PosteriorCsn> {
    let b = prior.blocks()?;
    let p = b.mean.len();
    if obs.g.cols() != p {
        return shape(format!("G has {} columns for a prior of {p} values", obs.g.cols()));
    }
    let gs11 = obs.g.matmul(&b.s11)?;
    let gs12 = obs.g.matmul(&b.s12)?;
    let mut cov_bb = obs.g.matmul(&gs11.transpose())?.add(&obs.error.to_dense())?;
    cov_bb.symmetrize();
    let split = GaussianSplit {
        mean_a: b.mean.iter().copied().chain(std::iter::repeat_n(0.0, p)).collect(),
        mean_b: obs.g.matvec(&b.mean)?,
        cov_aa: Matrix::block2(&b.s11, &b.s12, &b.s12.transpose(), &b.s22)?,
        cov_ab: Matrix::vstack(&gs11.transpose(), &gs12.transpose())?,
        cov_bb,
    };
    let (mean, cov) = conditional_gaussian(&split, &obs.d)?;
    Ok(PosteriorCsn::from_joint(mean, cov, p, Vec::new()))
}

/// Further conditions on `U1[well] = m_w`; those entries become exact.
pub fn condition_on_well(post: &PosteriorCsn, well: &WellData) -> Result<PosteriorCsn> {
    let p = post.p();
    well.check(p)?;
    if well.is_empty() {
        return Ok(post.clone());
    }
    let n = p + post.q();
    let cov = post.joint_cov()?;
    let all: Vec<usize> = (0..n).collect();
    let split = GaussianSplit {
        mean_a: post.mean_u1.iter().chain(&post.mean_u2).copied().collect(),
        mean_b: well.indices.iter().map(|&i| post.mean_u1[i]).collect(),
        cov_aa: cov.clone(),
        cov_ab: cov.select(&all, &well.indices),
        cov_bb: cov.select(&well.indices, &well.indices),
    };
    let chol = cholesky_nonsingular(&split.cov_bb, "well conditioning")?;
    let (mut mean, mut cov) = conditional_with_factor(&split, &chol, &well.values)?;
    for (&i, &v) in well.indices.iter().zip(&well.values) {
        mean[i] = v;
        for j in 0..n {
            cov[(i, j)] = 0.0;
            cov[(j, i)] = 0.0;
        }
    }
    let mut fixed = post.fixed.clone();
    fixed.extend_from_slice(&well.indices);
    fixed.sort_unstable();
    fixed.dedup();
    Ok(PosteriorCsn::from_joint(mean, cov, p, fixed))
}

/// Controls for [`predict`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub n_a: usize,
    /// Independent chains; samples are split evenly and concatenated in order.
    pub n_chains: usize,
    /// Burn-in length in sweeps over all block sets.
    pub burn_in_sweeps: usize,
    /// Sweeps between retained states.
    pub thin_sweeps: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            seed: 1,
            n_a: DEFAULT_BLOCK,
            n_chains: 4,
            burn_in_sweeps: 40,
            thin_sweeps: 1,
        }
    }
}

/// Central 80% band per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    pub q10: Vec<f64>,
    pub q90: Vec<f64>,
}

/// Per-site summaries of the predictive distribution of `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub median: Vec<f64>,
    pub q10: Vec<f64>,
    pub q90: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Draws of `m`; empty for analytic predictions.
    #[serde(skip)]
    pub samples: Vec<Vec<f64>>,
    pub acceptance_rate: Option<f64>,
}

impl Prediction {
    pub fn bands(&self) -> Bands {
        Bands {
            q10: self.q10.clone(),
            q90: self.q90.clone(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Prediction {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Prediction {
            median: pick(&self.median),
            q10: pick(&self.q10),
            q90: pick(&self.q90),
            mean: pick(&self.mean),
            sd: pick(&self.sd),
            samples: self.samples.iter().map(|s| pick(s)).collect(),
            acceptance_rate: self.acceptance_rate,
        }
    }
}

/// Type-7 sample quantile of sorted data.
fn quantile_sorted(xs: &[f64], prob: f64) -> f64 {
    let h = (xs.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(xs.len() - 1);
    xs[lo] + (h - lo as f64) * (xs[hi] - xs[lo])
}

/// Draws of `(U1 | U2 ≤ 0)` from `n_chains` independent block MH chains.
fn draw_posterior(post: &PosteriorCsn, n: usize, cfg: &PredictConfig) -> Result<(Vec<Vec<f64>>, f64)> {
    let (p, q) = (post.p(), post.q());
    if cfg.n_chains == 0 || cfg.thin_sweeps == 0 {
        return domain("n_chains and thin_sweeps must be positive");
    }
    let n_a = cfg.n_a.clamp(1, q);
    let plan = build_block_plan(&post.cov_u2, n_a, default_max_sets(q, n_a))?;
    let n_sets = plan.sets().len();

    // U1 | U2 = mean_u1 + K (u2 - mean_u2) + L z with K = cross · cov_u2⁻¹
    let chol2 = cholesky_nonsingular(&post.cov_u2, "latent posterior covariance")?;
    let v = chol2.solve_lower_mat(&post.cross.transpose())?;
    let mut kt = Matrix::zeros(q, p);
    for j in 0..p {
        let col: Vec<f64> = (0..q).map(|i| v[(i, j)]).collect();
        for (i, x) in chol2.solve_upper(&col)?.into_iter().enumerate() {
            kt[(i, j)] = x;
        }
    }
    let k = kt.transpose();
    let is_fixed = {
        let mut f = vec![false; p];
        for &i in &post.fixed {
            f[i] = true;
        }
        f
    };
    let free: Vec<usize> = (0..p).filter(|&i| !is_fixed[i]).collect();
    let mut cond = post.cov_u1.sub(&v.gram())?;
    cond.symmetrize();
    let chol1 = if free.is_empty() {
        None
    } else {
        Some(cholesky(&cond.select(&free, &free))?)
    };

    let per: Vec<usize> = (0..cfg.n_chains)
        .map(|c| n / cfg.n_chains + usize::from(c < n % cfg.n_chains))
        .collect();
    let chains: Vec<Result<(Vec<Vec<f64>>, u64, u64)>> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(c as u64);
            let mut state = TruncChainState::new(&plan, &post.mean_u2)?;
            for _ in 0..cfg.burn_in_sweeps * n_sets {
                mh_step(&plan, &mut state, &mut rng);
            }
            let (mut steps, mut acc) = (0u64, 0u64);
            let mut out = Vec::with_capacity(per[c]);
            let mut z = vec![0.0; free.len()];
            for _ in 0..per[c] {
                for _ in 0..cfg.thin_sweeps * n_sets {
                    steps += 1;
                    acc += u64::from(mh_step(&plan, &mut state, &mut rng));
                }
                let resid: Vec<f64> = state.x().iter().zip(&post.mean_u2).map(|(a, b)| a - b).collect();
                let shift = k.matvec(&resid)?;
                let mut m = post.mean_u1.clone();
                if let Some(l) = &chol1 {
                    for zi in z.iter_mut() {
                        *zi = StandardNormal.sample(&mut rng);
                    }
                    let noise = l.mul_lower(&z)?;
                    for (fi, &i) in free.iter().enumerate() {
                        m[i] += shift[i] + noise[fi];
                    }
                }
                out.push(m);
            }
            Ok((out, steps, acc))
        })
        .collect();
    let mut samples = Vec::with_capacity(n);
    let (mut steps, mut acc) = (0u64, 0u64);
    for c in chains {
        let (s, st, ac) = c?;
        samples.extend(s);
        steps += st;
        acc += ac;
    }
    Ok((samples, if steps == 0 { f64::NAN } else { acc as f64 / steps as f64 }))
}

/// Samples the posterior and summarizes it per site.
pub fn predict(post: &PosteriorCsn, cfg: &PredictConfig) -> Result<Prediction> {
    if cfg.n_samples < 100 {
        return domain(format!("n_samples must be at least 100, got {}", cfg.n_samples));
    }
    let (samples, rate) = draw_posterior(post, cfg.n_samples, cfg)?;
    let p = post.p();
    let n = samples.len() as f64;
    let mut pred = Prediction {
        median: vec![0.0; p],
        q10: vec![0.0; p],
        q90: vec![0.0; p],
        mean: vec![0.0; p],
        sd: vec![0.0; p],
        samples: Vec::new(),
        acceptance_rate: Some(rate),
    };
    let mut col = vec![0.0; samples.len()];
    for i in 0..p {
        for (c, s) in col.iter_mut().zip(&samples) {
            *c = s[i];
        }
        let mean = col.iter().sum::<f64>() / n;
        pred.mean[i] = mean;
        pred.sd[i] = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        col.sort_by(f64::total_cmp);
        pred.median[i] = quantile_sorted(&col, 0.5);
        pred.q10[i] = quantile_sorted(&col, 0.1);
        pred.q90[i] = quantile_sorted(&col, 0.9);
    }
    pred.samples = samples;
    Ok(pred)
}

/// Closed-form prediction when `U1` is independent of `U2`, i.e. the
/// Gauss-linear posterior of a prior with all `γ = 0`.
pub fn gaussian_prediction(post: &PosteriorCsn) -> Result<Prediction> {
    if post.cross.max_abs() != 0.0 {
        return domain("posterior couples U1 and U2; use predict");
    }
    let sd: Vec<f64> = post.cov_u1.diag().into_iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok(Prediction {
        median: post.mean_u1.clone(),
        q10: post.mean_u1.iter().zip(&sd).map(|(m, s)| m - Z80 * s).collect(),
        q90: post.mean_u1.iter().zip(&sd).map(|(m, s)| m + Z80 * s).collect(),
        mean: post.mean_u1.clone(),
        sd,
        samples: Vec::new(),
        acceptance_rate: None,
    })
}

/// Prior 80% bands: analytic for a Gaussian prior, sampled otherwise.
pub fn prior_bands(prior: &PriorSpec, cfg: &PredictConfig) -> Result<Bands> {
    let post = PosteriorCsn::from_prior(prior)?;
    let pred = if prior.gamma.iter().all(|&g| g == 0.0) {
        gaussian_prediction(&post)?
    } else {
        predict(&post, cfg)?
    };
    Ok(pred.bands())
}

/// `log p(d, m_w)` for the CSN prior: Gaussian density of the observations
/// plus the ratio of latent orthant probabilities after and before
/// conditioning, both estimated with the same uniforms.
pub fn marginal_loglik_obs(
    prior: &PriorSpec,
    obs: &LinearObsModel,
    well: &WellData,
    crn: &CrnStream,
    shift: ShiftPolicy,
) -> Result<f64> {
    let b = prior.blocks()?;
    let p = b.mean.len();
    well.check(p)?;
    if obs.g.cols() != p {
        return shape(format!("G has {} columns for a prior of {p} values", obs.g.cols()));
    }
    let w = &well.indices;
    let all: Vec<usize> = (0..p).collect();
    let gs11 = obs.g.matmul(&b.s11)?;
    let mut k_dd = obs.g.matmul(&gs11.transpose())?.add(&obs.error.to_dense())?;
    k_dd.symmetrize();
    let k_dw = gs11.select(&(0..obs.d.len()).collect::<Vec<_>>(), w);
    let k_ww = b.s11.select(w, w);
    let cov_y = Matrix::block2(&k_dd, &k_dw, &k_dw.transpose(), &k_ww)?;
    let mut mean_y = obs.g.matvec(&b.mean)?;
    mean_y.extend(w.iter().map(|&i| b.mean[i]));
    let y: Vec<f64> = obs.d.iter().chain(&well.values).copied().collect();
    let chol = cholesky_nonsingular(&cov_y, "observation covariance")?;
    let log_gauss = mvn_log_pdf(&y, &mean_y, &chol)?;
    if prior.gamma.iter().all(|&g| g == 0.0) {
        return Ok(log_gauss);
    }
    let s21 = b.s12.transpose();
    let gs12t = obs.g.matmul(&b.s12)?.transpose();
    let cov_u2y = Matrix::block2(
        &gs12t,
        &s21.select(&all, w),
        &Matrix::zeros(0, gs12t.cols()),
        &Matrix::zeros(0, w.len()),
    )?;
    let split = GaussianSplit {
        mean_a: vec![0.0; p],
        mean_b: mean_y,
        cov_aa: b.s22.clone(),
        cov_ab: cov_u2y,
        cov_bb: cov_y,
    };
    let (cm, cc) = conditional_with_factor(&split, &chol, &y)?;
    let num = estimate_orthant(&OrthantProblem::with_policy(cm, &cc, shift)?, crn)?;
    let den = estimate_orthant(&OrthantProblem::with_policy(vec![0.0; p], &b.s22, shift)?, crn)?;
    Ok(log_gauss + num.log_value - den.log_value)
}

/// Full hyperparameter set of the inversion model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub sigma2_e: f64,
    /// Error correlation ranges over (angle, trace, time).
    pub error_ranges: [f64; 3],
    pub mu0: Vec<f64>,
    pub sigma0: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub d_h: f64,
    pub d_v: f64,
}

impl Hyper {
    pub fn n_vars(&self) -> usize {
        self.mu0.len()
    }

    pub fn prior(&self, grid: &GridSpec, delta: DeltaForm) -> Result<PriorSpec> {
        let prior = PriorSpec {
            n_vars: self.n_vars(),
            mu0: self.mu0.clone(),
            sigma0: self.sigma0.clone(),
            gamma: self.gamma.clone(),
            d_h: self.d_h,
            d_v: self.d_v,
            grid: *grid,
            delta,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn obs_model(&self, survey: &Survey, grid: &GridSpec, d: Vec<f64>) -> Result<LinearObsModel> {
        let fwd = survey.forward(grid)?;
        let err = error_cov(self.sigma2_e, self.error_ranges, fwd.n_angles(), grid)?;
        LinearObsModel::new(fwd.to_dense(), err, d)
    }
}

/// Synthetic truth and data.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub m: Vec<f64>,
    pub d: Vec<f64>,
    pub well: Option<WellColumn>,
}

/// Draws `m` from the CSN prior of `theta` and `d = G m + e`.
pub fn synth_data(
    theta: &Hyper,
    survey: &Survey,
    grid: &GridSpec,
    delta: DeltaForm,
    seed: u64,
    well_col: Option<usize>,
) -> Result<SynthData> {
    if survey.n_vars != theta.n_vars() {
        return shape("survey and hyperparameters disagree on n_vars");
    }
    let prior = theta.prior(grid, delta)?;
    let cfg = PredictConfig {
        seed,
        n_chains: 1,
        ..PredictConfig::default()
    };
    let (mut draws, _) = draw_posterior(&PosteriorCsn::from_prior(&prior)?, 1, &cfg)?;
    let m = draws.pop().expect("one draw");
    let fwd = survey.forward(grid)?;
    let mut d = fwd.apply(&m)?;
    if theta.sigma2_e < 0.0 || !theta.sigma2_e.is_finite() {
        return domain("error variance must be finite and nonnegative");
    }
    if theta.sigma2_e > 0.0 {
        let err = error_cov(theta.sigma2_e, theta.error_ranges, fwd.n_angles(), grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let z: Vec<f64> = (0..d.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e = err.color(&err.cholesky_factors()?, &z)?;
        for (a, b) in d.iter_mut().zip(e) {
            *a += b;
        }
    }
    let well = well_col
        .map(|c| WellColumn::extract(&m, grid, theta.n_vars(), c))
        .transpose()?;
    Ok(SynthData { m, d, well })
}

/// MAE and 80% coverage per variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: Vec<f64>,
    pub posterior_coverage: Vec<f64>,
    pub prior_coverage: Option<Vec<f64>>,
}

/// Scores a prediction against the truth. The site vectors are split into
/// `n_vars` equal consecutive blocks.
pub fn evaluate(pred: &Prediction, truth: &[f64], prior: Option<&Bands>, n_vars: usize) -> Result<Metrics> {
    let n = truth.len();
    if pred.median.len() != n || pred.q10.len() != n || pred.q90.len() != n {
        return shape("prediction and truth differ in length");
    }
    if let Some(b) = prior {
        if b.q10.len() != n || b.q90.len() != n {
            return shape("prior bands and truth differ in length");
        }
    }
    if n_vars == 0 || n == 0 || n % n_vars != 0 {
        return shape(format!("{n} sites cannot be split into {n_vars} variables"));
    }
    let m = n / n_vars;
    let inside = |lo: &[f64], hi: &[f64], k: usize| {
        (k * m..(k + 1) * m).filter(|&i| lo[i] <= truth[i] && truth[i] <= hi[i]).count() as f64 / m as f64
    };
    Ok(Metrics {
        mae: (0..n_vars)
            .map(|k| (k * m..(k + 1) * m).map(|i| (pred.median[i] - truth[i]).abs()).sum::<f64>() / m as f64)
            .collect(),
        posterior_coverage: (0..n_vars).map(|k| inside(&pred.q10, &pred.q90, k)).collect(),
        prior_coverage: prior.map(|b| (0..n_vars).map(|k| inside(&b.q10, &b.q90, k)).collect()),
    })
}

/// Controls for [`fit_hyperparams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperFitConfig {
    pub n_mc: usize,
    pub crn_seed: u64,
    /// Traces kept on each side of the well.
    pub window: usize,
    /// Estimate `σ²_e` and the error ranges; otherwise they stay at the start.
    pub fit_error: bool,
    /// Freeze `γ = 0` (Gaussian prior).
    pub gaussian: bool,
    pub gamma_starts: Vec<f64>,
    pub simplex_iters: usize,
    pub newton_iters: usize,
    pub delta: DeltaForm,
    pub shift: ShiftPolicy,
}

impl Default for HyperFitConfig {
    fn default() -> Self {
        Self {
            n_mc: 500,
            crn_seed: 1,
            window: 4,
            fit_error: true,
            gaussian: false,
            gamma_starts: vec![-0.8, 0.0, 0.8],
            simplex_iters: 300,
            newton_iters: 40,
            delta: DeltaForm::default(),
            shift: ShiftPolicy::Conditional,
        }
    }
}

/// Plug-in hyperparameters and the design they were fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperFit {
    pub theta: Hyper,
    pub loglik: f64,
    /// Window grid used for the fit.
    pub design: GridSpec,
    pub window_cols: (usize, usize),
    pub evaluations: usize,
    pub converged: bool,
    pub gaussian: bool,
}

impl HyperFit {
    /// Prior for prediction on `grid`, which must share the fitted design.
    pub fn prior_on(&self, grid: &GridSpec, delta: DeltaForm) -> Result<PriorSpec> {
        self.theta.prior(&self.design, delta)?.on_grid(grid)
    }
}

/// Observation window of traces `lo..=hi` around the well.
struct Window {
    grid: GridSpec,
    lo: usize,
    hi: usize,
    d: Vec<f64>,
    well: WellData,
}

fn window_around(d: &[f64], well: &WellColumn, grid: &GridSpec, n_angles: usize, n_vars: usize, half: usize) -> Result<Window> {
    let s = grid.len();
    if d.len() != n_angles * s {
        return shape(format!("expected {} observations, got {}", n_angles * s, d.len()));
    }
    let lo = well.col.saturating_sub(half);
    let hi = (well.col + half).min(grid.n_cols - 1);
    let wgrid = GridSpec::new(grid.n_rows, hi - lo + 1, grid.spacing_v, grid.spacing_h)?;
    let n_t = grid.n_rows;
    let mut dw = Vec::with_capacity(n_angles * wgrid.len());
    for a in 0..n_angles {
        dw.extend_from_slice(&d[a * s + lo * n_t..a * s + (hi + 1) * n_t]);
    }
    let local = WellColumn {
        col: well.col - lo,
        values: well.values.clone(),
    };
    Ok(Window {
        well: local.well_data(&wgrid, n_vars)?,
        grid: wgrid,
        lo,
        hi,
        d: dw,
    })
}

/// Unconstrained coordinates: optional log error block, `μ⁰`, the Cholesky
/// factor of `Σ⁰` (log diagonal), optional `atanh γ`, log prior ranges.
struct Coding {
    n: usize,
    fit_error: bool,
    fit_gamma: bool,
    base: Hyper,
}

impl Coding {
    fn encode(&self, h: &Hyper) -> Result<Vec<f64>> {
        let mut x = Vec::new();
        if self.fit_error {
            x.push(h.sigma2_e.ln());
            x.extend(h.error_ranges.iter().map(|r| r.max(1e-3).ln()));
        }
        x.extend(&h.mu0);
        let l = cholesky(&Matrix::from_rows(&h.sigma0)?)?;
        for i in 0..self.n {
            for j in 0..=i {
                let v = l.lower()[(i, j)];
                x.push(if i == j { v.ln() } else { v });
            }
        }
        if self.fit_gamma {
            x.extend(h.gamma.iter().map(|g| g.clamp(-GAMMA_LIMIT, GAMMA_LIMIT).atanh()));
        }
        x.push(h.d_h.max(1e-3).ln());
        x.push(h.d_v.max(1e-3).ln());
        Ok(x)
    }

    fn decode(&self, x: &[f64]) -> Hyper {
        let n = self.n;
        let mut h = self.base.clone();
        let mut it = x.iter().copied();
        let mut next = || it.next().expect("coordinate count");
        if self.fit_error {
            h.sigma2_e = next().exp();
            for r in &mut h.error_ranges {
                *r = next().exp();
            }
        }
        for m in &mut h.mu0 {
            *m = next();
        }
        let mut l = vec![vec![0.0; n]; n];
        for (i, row) in l.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate().take(i + 1) {
                let raw = next();
                *v = if i == j { raw.exp() } else { raw };
            }
        }
        h.sigma0 = (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| l[i][k] * l[j][k]).sum()).collect())
            .collect();
        if self.fit_gamma {
            for g in &mut h.gamma {
                *g = next().tanh().clamp(-GAMMA_LIMIT, GAMMA_LIMIT);
            }
        } else {
            h.gamma = vec![0.0; n];
        }
        h.d_h = next().exp();
        h.d_v = next().exp();
        h
    }
}

/// Maximizes the windowed marginal likelihood of `(d, m_w)`.
///
/// `start` supplies initial values and, with `fit_error = false`, the fixed
/// error model. The CSN fit first fits the Gaussian prior, then screens
/// `gamma_starts` with mean and variance moment-matched to the Gaussian
/// estimate and refines the best candidate.
pub fn fit_hyperparams(
    d: &[f64],
    well: &WellColumn,
    survey: &Survey,
    grid: &GridSpec,
    start: &Hyper,
    config: &HyperFitConfig,
) -> Result<HyperFit> {
    let n = survey.n_vars;
    if start.n_vars() != n {
        return shape("start and survey disagree on n_vars");
    }
    let win = window_around(d, well, grid, survey.angles.len(), n, config.window)?;
    let fwd = survey.forward(&win.grid)?.to_dense();
    let crn = make_crn(config.crn_seed, config.n_mc, n * win.grid.len())?;
    let evaluate_at = |h: &Hyper| -> Result<f64> {
        let prior = h.prior(&win.grid, config.delta)?;
        let err = error_cov(h.sigma2_e, h.error_ranges, survey.angles.len(), &win.grid)?;
        let obs = LinearObsModel::new(fwd.clone(), err, win.d.clone())?;
        marginal_loglik_obs(&prior, &obs, &win.well, &crn, config.shift)
    };
    let run = |coding: &Coding, x0: Vec<f64>| -> Result<(Vec<f64>, f64, usize, bool)> {
        let obj = |x: &[f64]| match evaluate_at(&coding.decode(x)) {
            Ok(v) if v.is_finite() => -v,
            _ => f64::INFINITY,
        };
        let step = vec![0.3; x0.len()];
        let nm = nelder_mead(obj, &x0, &step, config.simplex_iters, 1e-6)?;
        let bf = bfgs(obj, &nm.x, config.newton_iters, 1e-4, 1e-4)?;
        let evals = nm.evaluations + bf.evaluations;
        let best = if bf.fx <= nm.fx { bf } else { nm };
        Ok((best.x, best.fx, evals, best.converged))
    };

    let mut gauss_start = start.clone();
    gauss_start.gamma = vec![0.0; n];
    let gcode = Coding {
        n,
        fit_error: config.fit_error,
        fit_gamma: false,
        base: gauss_start.clone(),
    };
    let (gx, gf, mut evals, mut converged) = run(&gcode, gcode.encode(&gauss_start)?)?;
    let mut best = gcode.decode(&gx);
    let mut best_f = gf;

    if !config.gaussian {
        let ccode = Coding {
            n,
            fit_error: config.fit_error,
            fit_gamma: true,
            base: best.clone(),
        };
        let combos = gamma_grid(&config.gamma_starts, n);
        let scored: Vec<(Hyper, f64)> = combos
            .into_par_iter()
            .map(|g| {
                let h = moment_matched(&best, &g);
                let v = evaluate_at(&h).unwrap_or(f64::NEG_INFINITY);
                (h, v)
            })
            .collect();
        let (h0, _) = scored
            .into_iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .ok_or_else(|| Error::Config("gamma_starts is empty".into()))?;
        let (cx, cf, ce, cc) = run(&ccode, ccode.encode(&h0)?)?;
        evals += ce;
        best = ccode.decode(&cx);
        best_f = cf;
        converged = cc;
    }
    if !best_f.is_finite() {
        return Err(Error::Optimization("no finite marginal likelihood found".into()));
    }
    Ok(HyperFit {
        theta: best,
        loglik: -best_f,
        design: win.grid,
        window_cols: (win.lo, win.hi),
        evaluations: evals,
        converged,
        gaussian: config.gaussian,
    })
}

fn gamma_grid(values: &[f64], n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |&g| {
                    let mut v = prefix.clone();
                    v.push(g);
                    v
                })
            })
            .collect();
    }
    out
}

/// Gaussian-fit hyperparameters with `γ` set and `μ⁰`, `Σ⁰` adjusted so each
/// variable keeps its marginal mean and variance.
fn moment_matched(gauss: &Hyper, gamma: &[f64]) -> Hyper {
    let n = gamma.len();
    let c = 2.0 / PI;
    let scale: Vec<f64> = gamma.iter().map(|g| (1.0 - c * g * g).sqrt().recip()).collect();
    let mut h = gauss.clone();
    h.gamma = gamma.to_vec();
    for i in 0..n {
        for j in 0..n {
            h.sigma0[i][j] = gauss.sigma0[i][j] * scale[i] * scale[j];
        }
    }
    for (k, m) in h.mu0.iter_mut().enumerate() {
        *m -= gamma[k] * h.sigma0[k][k].sqrt() * c.sqrt();
    }
    h
}

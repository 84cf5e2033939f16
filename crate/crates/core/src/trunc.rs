//! Block Metropolis-Hastings for `N(μ, Σ)` truncated to the negative orthant.
//!
//! A step picks one precomputed block `a`, proposes `x_a'` from the
//! sequential zero-truncated conditionals of `x_a | x_b`, and accepts with
//! probability
//!
//! ```text
//! min{1, Π_i Φ(0 | x'_{a,<i}, x_b) / Π_i Φ(0 | x_{a,<i}, x_b)}
//! ```
//!
//! The chain carries `r = Q (x - μ)` with `Q = Σ⁻¹`, so the block
//! conditional mean is `x_a - (Q_aa)⁻¹ r_a` and an accepted move costs one
//! rank-`n_a` update of `r`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::gaussian::cholesky::{cholesky, cholesky_nonsingular, CholFactor};
use crate::gaussian::normal::{std_log_cdf, truncated_upper_draw};
use crate::linalg::{axpy, dot, Matrix};
use crate::orthant::open_uniform;

/// Default block size.
pub const DEFAULT_BLOCK: usize = 100;

/// Initial value for coordinates whose mean is not already negative.
const INIT_CEILING: f64 = -1e-3;

/// One update block with its conditional law given the complement.
#[derive(Debug, Clone)]
pub struct BlockSet {
    pub anchor: usize,
    /// Ascending site indices.
    pub members: Vec<usize>,
    /// `(Q_aa)⁻¹`, the conditional covariance of the block.
    cond_cov: Matrix<f64>,
    cond_chol: CholFactor<f64>,
}

impl BlockSet {
    pub fn cond_cov(&self) -> &Matrix<f64> {
        &self.cond_cov
    }
}

/// Update blocks and the precision matrix they share.
#[derive(Debug, Clone)]
pub struct BlockPlan {
    n_a: usize,
    sets: Vec<BlockSet>,
    precision: Matrix<f64>,
}

impl BlockPlan {
    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn sets(&self) -> &[BlockSet] {
        &self.sets
    }

    pub fn dim(&self) -> usize {
        self.precision.rows()
    }

    pub fn precision(&self) -> &Matrix<f64> {
        &self.precision
    }
}

/// Default cap on the number of blocks, `⌈n / n_a⌉ · 4`.
pub fn default_max_sets(n: usize, n_a: usize) -> usize {
    n.div_ceil(n_a.max(1)) * 4
}

/// The `n_a` sites most correlated with `anchor` (anchor first), by
/// `|corr|`; ties go to the smaller forward offset `(j - anchor) mod n`.
pub fn block_for_anchor(cov: &Matrix<f64>, anchor: usize, n_a: usize) -> Result<Vec<usize>> {
    let n = cov.rows();
    if !cov.is_square() {
        return shape("covariance is not square");
    }
    if anchor >= n {
        return domain(format!("anchor {anchor} out of range for dimension {n}"));
    }
    if n_a == 0 || n_a > n {
        return domain(format!("block size {n_a} not in 1..={n}"));
    }
    let sd_a = cov[(anchor, anchor)].sqrt();
    let row = cov.row(anchor);
    let corr = |j: usize| -> f64 {
        if j == anchor {
            return f64::INFINITY;
        }
        let den = sd_a * cov[(j, j)].sqrt();
        if den > 0.0 {
            (row[j] / den).abs()
        } else {
            0.0
        }
    };
    let offset = |j: usize| (j + n - anchor) % n;
    let mut idx: Vec<usize> = (0..n).collect();
    let key = |a: &usize, b: &usize| corr(*b).total_cmp(&corr(*a)).then(offset(*a).cmp(&offset(*b)));
    if n_a < n {
        idx.select_nth_unstable_by(n_a - 1, key);
        idx.truncate(n_a);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Anchors evenly spaced in site order, then extra anchors at sites left
/// uncovered. Coverage takes precedence over `max_sets`.
fn choose_anchors(cov: &Matrix<f64>, n_a: usize, max_sets: usize) -> Result<Vec<(usize, Vec<usize>)>> {
    let n = cov.rows();
    let k = max_sets.min(n).max(1);
    let mut covered = vec![false; n];
    let mut out = Vec::with_capacity(k);
    let mut seen = vec![false; n];
    for s in 0..k {
        let anchor = ((s as f64 + 0.5) * n as f64 / k as f64) as usize;
        let anchor = anchor.min(n - 1);
        if seen[anchor] {
            continue;
        }
        seen[anchor] = true;
        let members = block_for_anchor(cov, anchor, n_a)?;
        for &m in &members {
            covered[m] = true;
        }
        out.push((anchor, members));
    }
    while let Some(anchor) = covered.iter().position(|c| !c) {
        let members = block_for_anchor(cov, anchor, n_a)?;
        for &m in &members {
            covered[m] = true;
        }
        out.push((anchor, members));
    }
    Ok(out)
}

/// Chooses the update blocks and precomputes their conditional laws.
pub fn build_block_plan(cov: &Matrix<f64>, n_a: usize, max_sets: usize) -> Result<BlockPlan> {
    if !cov.is_square() || cov.rows() == 0 {
        return shape("block plan needs a nonempty square covariance");
    }
    let n = cov.rows();
    if n_a == 0 || n_a > n {
        return domain(format!("block size {n_a} not in 1..={n}"));
    }
    if max_sets == 0 {
        return domain("max_sets must be positive");
    }
    let precision = cholesky(cov)?.inverse();
    let sets = choose_anchors(cov, n_a, max_sets)?
        .into_iter()
        .map(|(anchor, members)| {
            let q_aa = precision.select(&members, &members);
            let q_chol = cholesky_nonsingular(&q_aa, "block precision")?;
            let mut cond_cov = q_chol.inverse();
            cond_cov.symmetrize();
            let cond_chol = cholesky(&cond_cov)?;
            Ok(BlockSet {
                anchor,
                members,
                cond_cov,
                cond_chol,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockPlan { n_a, sets, precision })
}

/// State of the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncChainState {
    x: Vec<f64>,
    mean: Vec<f64>,
    // Q (x - μ)
    resid: Vec<f64>,
    pub step_count: u64,
    pub accept_count: u64,
}

impl TruncChainState {
    /// Starts at `x_i = min(-1e-3, μ_i)`.
    pub fn new(plan: &BlockPlan, mean: &[f64]) -> Result<Self> {
        let x = mean.iter().map(|&m| m.min(INIT_CEILING)).collect();
        Self::from_point(plan, mean, x)
    }

    pub fn from_point(plan: &BlockPlan, mean: &[f64], x: Vec<f64>) -> Result<Self> {
        if mean.len() != plan.dim() || x.len() != plan.dim() {
            return shape("chain state does not match the plan dimension");
        }
        if x.iter().any(|&v| !(v <= 0.0)) {
            return domain("chain must start inside the negative orthant");
        }
        let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
        let resid = plan.precision.matvec(&diff)?;
        Ok(Self {
            x,
            mean: mean.to_vec(),
            resid,
            step_count: 0,
            accept_count: 0,
        })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.step_count == 0 {
            0.0
        } else {
            self.accept_count as f64 / self.step_count as f64
        }
    }

    /// Conditional mean of block `set` given the rest of the state.
    fn block_mean(&self, set: &BlockSet) -> Vec<f64> {
        let r_a: Vec<f64> = set.members.iter().map(|&i| self.resid[i]).collect();
        let k = &set.cond_cov;
        set.members
            .iter()
            .enumerate()
            .map(|(t, &i)| self.x[i] - dot(k.row(t), &r_a))
            .collect()
    }

    fn apply(&mut self, plan: &BlockPlan, set: &BlockSet, proposal: &[f64]) {
        for (&i, &v) in set.members.iter().zip(proposal) {
            let delta = v - self.x[i];
            if delta != 0.0 {
                axpy(delta, plan.precision.row(i), &mut self.resid);
                self.x[i] = v;
            }
        }
    }
}

/// `Σ_i log Φ(b_i)` of the sequential conditionals for block values `xa`.
fn log_normalizer(set: &BlockSet, cond_mean: &[f64], xa: &[f64]) -> f64 {
    let l = set.cond_chol.lower();
    let mut z = vec![0.0; xa.len()];
    let mut acc = 0.0;
    for i in 0..xa.len() {
        let row = l.row(i);
        let m = cond_mean[i] + dot(&row[..i], &z[..i]);
        acc += std_log_cdf(-m / row[i]);
        z[i] = (xa[i] - m) / row[i];
    }
    acc
}

/// Draws block values in ascending site order; returns them with their
/// log normalizer.
fn draw_block<R: Rng + ?Sized>(set: &BlockSet, cond_mean: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
    let l = set.cond_chol.lower();
    let na = cond_mean.len();
    let mut z = vec![0.0; na];
    let mut out = vec![0.0; na];
    let mut acc = 0.0;
    for i in 0..na {
        let row = l.row(i);
        let m = cond_mean[i] + dot(&row[..i], &z[..i]);
        let (zi, ln) = truncated_upper_draw(-m / row[i], open_uniform(rng));
        acc += ln;
        z[i] = zi;
        out[i] = (m + row[i] * zi).min(0.0);
    }
    (out, acc)
}

/// Proposal for block `set_index` from the sequential truncated conditionals.
pub fn propose_block<R: Rng + ?Sized>(
    plan: &BlockPlan,
    state: &TruncChainState,
    set_index: usize,
    rng: &mut R,
) -> Vec<f64> {
    let set = &plan.sets[set_index];
    draw_block(set, &state.block_mean(set), rng).0
}

/// MH acceptance probability of `proposal` for block `set_index`.
pub fn acceptance_prob(plan: &BlockPlan, state: &TruncChainState, set_index: usize, proposal: &[f64]) -> f64 {
    let set = &plan.sets[set_index];
    let m = state.block_mean(set);
    let current: Vec<f64> = set.members.iter().map(|&i| state.x[i]).collect();
    let log_ratio = log_normalizer(set, &m, proposal) - log_normalizer(set, &m, &current);
    log_ratio.min(0.0).exp()
}

/// One MH update of a uniformly chosen block. Returns whether it was accepted.
pub fn mh_step<R: Rng + ?Sized>(plan: &BlockPlan, state: &mut TruncChainState, rng: &mut R) -> bool {
    let k = rng.random_range(0..plan.sets.len());
    let set = &plan.sets[k];
    let m = state.block_mean(set);
    let (proposal, log_new) = draw_block(set, &m, rng);
    let current: Vec<f64> = set.members.iter().map(|&i| state.x[i]).collect();
    let log_ratio = log_new - log_normalizer(set, &m, &current);
    state.step_count += 1;
    let accept = log_ratio >= 0.0 || open_uniform(rng).ln() < log_ratio;
    if accept {
        state.accept_count += 1;
        state.apply(plan, set, &proposal);
    }
    accept
}

/// Chain length settings, counted in block updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl ChainConfig {
    /// Burn-in of ten updates per block, then `n_keep` states `thin` apart.
    pub fn for_plan(plan: &BlockPlan, n_keep: usize, thin: usize) -> Self {
        let burn_in = 10 * plan.sets.len();
        Self {
            n_iter: burn_in + n_keep * thin.max(1),
            burn_in,
            thin: thin.max(1),
        }
    }
}

/// Output of [`mh_sample`].
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub samples: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    pub final_state: TruncChainState,
}

/// Runs a chain from [`TruncChainState::new`] and keeps every `thin`-th
/// state after burn-in.
pub fn mh_sample(mean: &[f64], plan: &BlockPlan, config: ChainConfig, seed: u64) -> Result<ChainOutput> {
    if config.n_iter <= config.burn_in {
        return domain(format!(
            "n_iter ({}) must exceed burn_in ({})",
            config.n_iter, config.burn_in
        ));
    }
    if config.thin == 0 {
        return domain("thin must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = TruncChainState::new(plan, mean)?;
    for _ in 0..config.burn_in {
        mh_step(plan, &mut state, &mut rng);
    }
    let (burn_steps, burn_acc) = (state.step_count, state.accept_count);
    let mut samples = Vec::with_capacity((config.n_iter - config.burn_in) / config.thin);
    for t in 1..=config.n_iter - config.burn_in {
        mh_step(plan, &mut state, &mut rng);
        if t % config.thin == 0 {
            samples.push(state.x.clone());
        }
    }
    let steps = state.step_count - burn_steps;
    let acceptance_rate = (state.accept_count - burn_acc) as f64 / steps as f64;
    Ok(ChainOutput {
        samples,
        acceptance_rate,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::correlation::exp_correlation_1d;

    #[test]
    fn single_site_plan() {
        let plan = build_block_plan(&Matrix::from_diag(&[2.0]), 1, 4).unwrap();
        assert_eq!(plan.sets().len(), 1);
        assert_eq!(plan.sets()[0].members, vec![0]);
        assert!((plan.sets()[0].cond_cov()[(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn diagonal_ties_go_forward() {
        let cov = Matrix::<f64>::identity(5);
        for i in 0..4 {
            assert_eq!(block_for_anchor(&cov, i, 2).unwrap(), vec![i, i + 1]);
        }
        assert_eq!(block_for_anchor(&cov, 4, 2).unwrap(), vec![0, 4]);
    }

    #[test]
    fn exponential_neighbours() {
        let c = exp_correlation_1d(20, 1.0, 3.0).unwrap().into_matrix();
        assert_eq!(block_for_anchor(&c, 10, 3).unwrap(), vec![9, 10, 11]);
    }

    #[test]
    fn plan_covers_every_site() {
        let c = exp_correlation_1d(37, 1.0, 2.0).unwrap().into_matrix();
        let plan = build_block_plan(&c, 5, 3).unwrap();
        let mut seen = vec![false; 37];
        for s in plan.sets() {
            assert!(s.members.len() <= 5);
            for &m in &s.members {
                seen[m] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert!(build_block_plan(&c, 38, 3).is_err());
    }

    #[test]
    fn single_site_and_diagonal_moves_always_accepted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = exp_correlation_1d(6, 1.0, 2.0).unwrap().into_matrix();
        let mean = vec![0.3, -0.2, 0.0, 0.5, -1.0, 0.1];
        let plan = build_block_plan(&c, 1, 6).unwrap();
        let state = TruncChainState::new(&plan, &mean).unwrap();
        for k in 0..plan.sets().len() {
            let p = propose_block(&plan, &state, k, &mut rng);
            assert!((acceptance_prob(&plan, &state, k, &p) - 1.0).abs() < 1e-12);
        }
        let plan = build_block_plan(&Matrix::identity(6), 3, 4).unwrap();
        let state = TruncChainState::new(&plan, &mean).unwrap();
        for k in 0..plan.sets().len() {
            let p = propose_block(&plan, &state, k, &mut rng);
            assert!((acceptance_prob(&plan, &state, k, &p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_proposal_accepted() {
        let c = exp_correlation_1d(6, 1.0, 2.0).unwrap().into_matrix();
        let plan = build_block_plan(&c, 3, 4).unwrap();
        let state = TruncChainState::new(&plan, &[0.0; 6]).unwrap();
        let current: Vec<f64> = plan.sets()[0].members.iter().map(|&i| state.x()[i]).collect();
        assert_eq!(acceptance_prob(&plan, &state, 0, &current), 1.0);
    }

    #[test]
    fn univariate_truncated_moments() {
        let plan = build_block_plan(&Matrix::identity(1), 1, 1).unwrap();
        let out = mh_sample(&[0.0], &plan, ChainConfig { n_iter: 100_000, burn_in: 0, thin: 1 }, 1)
            .unwrap()
            .samples;
        assert_eq!(out.len(), 100_000);
        let n = out.len() as f64;
        let mean = out.iter().map(|x| x[0]).sum::<f64>() / n;
        let var = out.iter().map(|x| (x[0] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean + (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.01, "{mean}");
        assert!((var - (1.0 - 2.0 / std::f64::consts::PI)).abs() < 0.01, "{var}");
    }

    #[test]
    fn proposal_has_positive_block_correlation() {
        let cov = Matrix::from_rows(&[vec![1.0, 0.9], vec![0.9, 1.0]]).unwrap();
        let plan = build_block_plan(&cov, 2, 1).unwrap();
        let state = TruncChainState::new(&plan, &[0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws: Vec<Vec<f64>> = (0..20_000).map(|_| propose_block(&plan, &state, 0, &mut rng)).collect();
        let n = draws.len() as f64;
        let m0 = draws.iter().map(|d| d[0]).sum::<f64>() / n;
        let m1 = draws.iter().map(|d| d[1]).sum::<f64>() / n;
        let c = draws.iter().map(|d| (d[0] - m0) * (d[1] - m1)).sum::<f64>() / n;
        assert!(c > 0.0);
        assert!(draws.iter().flatten().all(|&v| v <= 0.0));
    }

    #[test]
    fn same_seed_same_chain() {
        let c = exp_correlation_1d(8, 1.0, 2.0).unwrap().into_matrix();
        let plan = build_block_plan(&c, 3, 8).unwrap();
        let cfg = ChainConfig { n_iter: 300, burn_in: 50, thin: 5 };
        let a = mh_sample(&[0.0; 8], &plan, cfg, 4).unwrap();
        let b = mh_sample(&[0.0; 8], &plan, cfg, 4).unwrap();
        assert_eq!(a.samples, b.samples);
        assert!(mh_sample(&[0.0; 8], &plan, ChainConfig { n_iter: 5, burn_in: 5, thin: 1 }, 4).is_err());
    }
}

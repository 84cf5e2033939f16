use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use skewfield::gaussian::cholesky;
use skewfield::gaussian::normal::std_cdf;
use skewfield::trunc::{build_block_plan, mh_sample, mh_step, ChainConfig, TruncChainState};
use skewfield::Matrix;

fn random_cov(rng: &mut ChaCha8Rng, n: usize) -> Matrix<f64> {
    let b = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let mut cov = b.matmul_t(&b).unwrap();
    cov.add_diag(0.2);
    cov.symmetrize();
    cov
}

fn rejection_samples(mean: &[f64], cov: &Matrix<f64>, keep: usize, seed: u64) -> Vec<Vec<f64>> {
    let l = cholesky(cov).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = mean.len();
    let mut out = Vec::with_capacity(keep);
    while out.len() < keep {
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x: Vec<f64> = l.mul_lower(&z).unwrap().iter().zip(mean).map(|(a, m)| a + m).collect();
        if x.iter().all(|&v| v <= 0.0) {
            out.push(x);
        }
    }
    out
}

/// Statistics `f(x)` with batch-means standard errors.
fn batch_stats(samples: &[Vec<f64>], f: &dyn Fn(&[f64]) -> f64, n_batches: usize) -> (f64, f64) {
    let vals: Vec<f64> = samples.iter().map(|s| f(s)).collect();
    let b = vals.len() / n_batches;
    let means: Vec<f64> = (0..n_batches)
        .map(|k| vals[k * b..(k + 1) * b].iter().sum::<f64>() / b as f64)
        .collect();
    let m = means.iter().sum::<f64>() / n_batches as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
    (m, (var / n_batches as f64).sqrt())
}

#[test]
fn chain_moments_match_rejection_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (inst, n) in [1usize, 2, 3, 4].into_iter().enumerate() {
        let cov = random_cov(&mut rng, n);
        let mean: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..0.3)).collect();
        let plan = build_block_plan(&cov, n.min(2), 2 * n).unwrap();
        let chain = mh_sample(&mean, &plan, ChainConfig { n_iter: 201_000, burn_in: 1000, thin: 1 }, 5 + inst as u64)
            .unwrap()
            .samples;
        let oracle = rejection_samples(&mean, &cov, 100_000, 99 + inst as u64);
        assert!(chain.iter().flatten().all(|&v| v <= 0.0));

        let mut checks: Vec<(String, Box<dyn Fn(&[f64]) -> f64>)> = Vec::new();
        for i in 0..n {
            checks.push((format!("mean[{i}]"), Box::new(move |x: &[f64]| x[i])));
        }
        let oracle_mean: Vec<f64> = (0..n).map(|i| batch_stats(&oracle, &|x| x[i], 50).0).collect();
        for i in 0..n {
            for j in i..n {
                let m = oracle_mean.clone();
                checks.push((
                    format!("cov[{i},{j}]"),
                    Box::new(move |x: &[f64]| (x[i] - m[i]) * (x[j] - m[j])),
                ));
            }
        }
        for (name, f) in &checks {
            let (a, sa) = batch_stats(&chain, f.as_ref(), 50);
            let (b, sb) = batch_stats(&oracle, f.as_ref(), 50);
            let se = (sa * sa + sb * sb).sqrt();
            assert!((a - b).abs() <= 3.0 * se, "instance {inst} {name}: chain {a} vs oracle {b} (se {se})");
        }
    }
}

#[test]
fn diagonal_marginals_are_truncated_normals() {
    let n = 4;
    let sd = [1.0, 0.5, 2.0, 1.3];
    let mu = [0.0, 0.4, -1.0, 0.8];
    let cov = Matrix::from_diag(&sd.map(|s| s * s));
    let plan = build_block_plan(&cov, 2, 4).unwrap();
    let out = mh_sample(&mu, &plan, ChainConfig { n_iter: 100_100, burn_in: 100, thin: 10 }, 21).unwrap();
    for i in 0..n {
        let mut xs: Vec<f64> = out.samples.iter().map(|s| s[i]).collect();
        xs.sort_by(f64::total_cmp);
        let norm = std_cdf(-mu[i] / sd[i]);
        let cdf = |x: f64| std_cdf((x - mu[i]) / sd[i]) / norm;
        let m = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let f = cdf(x);
                (f - k as f64 / m).abs().max(((k + 1) as f64 / m - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "site {i}: KS {ks}");
    }
}

#[test]
fn transitions_balance_between_cells() {
    // cells split each coordinate at a fixed threshold
    let cov = Matrix::from_rows(&[vec![1.0, 0.6], vec![0.6, 1.0]]).unwrap();
    let mean = [0.2, -0.3];
    let plan = build_block_plan(&cov, 2, 2).unwrap();
    let cell = |x: &[f64]| usize::from(x[0] < -0.6) + 2 * usize::from(x[1] < -0.8);
    let mut state = TruncChainState::new(&plan, &mean).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..1000 {
        mh_step(&plan, &mut state, &mut rng);
    }
    let mut counts = [[0u64; 4]; 4];
    let mut prev = cell(state.x());
    for _ in 0..400_000 {
        mh_step(&plan, &mut state, &mut rng);
        let c = cell(state.x());
        counts[prev][c] += 1;
        prev = c;
    }
    for a in 0..4 {
        for b in a + 1..4 {
            let (ab, ba) = (counts[a][b] as f64, counts[b][a] as f64);
            let tol = 4.0 * (ab + ba).sqrt().max(1.0);
            assert!((ab - ba).abs() <= tol, "cells {a}->{b}: {ab} vs {ba}");
        }
    }
}

#[test]
fn field_chain_stays_feasible() {
    let grid = skewfield::GridSpec::unit(8, 8).unwrap();
    let c = skewfield::gaussian::exp_correlation_matrix(&grid, 3.0, 3.0).unwrap().into_matrix();
    let mut s = c.scale(0.95);
    s.add_diag(0.05);
    let plan = build_block_plan(&s, 16, 16).unwrap();
    let out = mh_sample(&vec![0.5; 64], &plan, ChainConfig { n_iter: 2000, burn_in: 100, thin: 10 }, 2).unwrap();
    assert!(out.samples.iter().flatten().all(|&v| v <= 0.0));
    assert!(out.acceptance_rate > 0.0 && out.acceptance_rate <= 1.0);
}

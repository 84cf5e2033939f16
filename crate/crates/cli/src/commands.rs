//! Subcommand bodies. Each writes its files under `config.out` and finishes
//! with a manifest.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use skewfield::field::{
    build_model, case_params, empirical_moments, single_site_skewness, FieldRealization, FieldSampler,
    SimConfig,
};
use skewfield::gaussian::normal::std_quantile;
use skewfield::inversion::{
    condition_on_well, evaluate, fit_hyperparams, gaussian_prediction, posterior_csn, predict, prior_bands, synth_data,
    HyperFitConfig, PredictConfig, Prediction, Survey, WellColumn,
};
use skewfield::mle::{consistency_study, fit, mc_error_study, study_spread, MleConfig};
use skewfield::orthant::{equicorrelated_orthant, estimate_orthant, make_crn, OrthantProblem};
use skewfield::{GridSpec, Matrix};

use crate::config::{default_truth, parse_grid, RunConfig};
use crate::error::CliError;
use crate::io::{self, OutDir};

pub fn dispatch(name: &str, cfg: &RunConfig) -> Result<(), CliError> {
    let t0 = Instant::now();
    let mut out = OutDir::create(&cfg.out)?;
    let results = match name {
        "simulate" => simulate(cfg, &mut out)?,
        "orthant" => orthant(cfg, &mut out)?,
        "estimate" => estimate(cfg, &mut out)?,
        "invert" => invert(cfg, &mut out)?,
        other => return Err(CliError::Usage(format!("unknown command {other:?}"))),
    };
    out.manifest(name, cfg, results, t0.elapsed().as_secs_f64())
}

#[derive(Serialize)]
struct HistBin {
    bin_lo: f64,
    bin_hi: f64,
    count: usize,
    density: f64,
}

#[derive(Serialize)]
struct QqPoint {
    normal_quantile: f64,
    sample_quantile: f64,
}

#[derive(Serialize)]
struct RepSiteValue {
    rep: usize,
    row: usize,
    col: usize,
    value: f64,
}

fn histogram(values: &[f64], bins: usize) -> Vec<HistBin> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = values.len() as f64;
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistBin {
            bin_lo: lo + k as f64 * width,
            bin_hi: lo + (k + 1) as f64 * width,
            count,
            density: count as f64 / (n * width),
        })
        .collect()
}

/// Standardized sample quantiles against standard normal quantiles at 99 levels.
fn qq_pairs(values: &[f64]) -> Vec<QqPoint> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut z: Vec<f64> = values.iter().map(|v| (v - mean) / sd).collect();
    z.sort_by(f64::total_cmp);
    (1..100)
        .map(|k| {
            let p = k as f64 / 100.0;
            let h = (z.len() - 1) as f64 * p;
            let (i, f) = (h.floor() as usize, h - h.floor());
            let q = if i + 1 < z.len() { z[i] + f * (z[i + 1] - z[i]) } else { z[i] };
            QqPoint {
                normal_quantile: std_quantile(p),
                sample_quantile: q,
            }
        })
        .collect()
}

fn simulate(cfg: &RunConfig, out: &mut OutDir) -> Result<serde_json::Value, CliError> {
    let c = &cfg.simulate;
    let params = match c.params {
        Some(p) => p,
        None => case_params(c.case)?,
    };
    if c.realizations == 0 || c.bins == 0 {
        return Err(CliError::Usage("realizations and bins must be positive".into()));
    }
    let grid = parse_grid(&c.grid)?;
    let model = build_model(params, &grid)?;
    let sim = SimConfig {
        n_a: c.n_a,
        max_sets: None,
        updates_per_set: c.updates_per_set,
    };
    let t0 = Instant::now();
    let sampler = FieldSampler::new(model, sim)?;
    let setup_s = t0.elapsed().as_secs_f64();
    let runs: Vec<Result<(FieldRealization, f64), _>> = (0..c.realizations)
        .into_par_iter()
        .map(|k| {
            let t = Instant::now();
            sampler
                .simulate(cfg.seed.wrapping_add(k as u64))
                .map(|x| (x, t.elapsed().as_secs_f64()))
        })
        .collect();
    let mut samples = Vec::with_capacity(runs.len());
    let mut times = Vec::with_capacity(runs.len());
    for r in runs {
        let (x, t) = r?;
        samples.push(x);
        times.push(t);
    }

    out.csv("realization.csv", io::realization_rows(&samples[0]))?;
    if samples.len() > 1 {
        let rows = samples.iter().enumerate().flat_map(|(rep, x)| {
            io::realization_rows(x).into_iter().map(move |s| RepSiteValue {
                rep,
                row: s.row,
                col: s.col,
                value: s.value,
            })
        });
        out.csv("realizations.csv", rows)?;
    }
    let sites = grid.interior(c.margin);
    if sites.is_empty() {
        return Err(CliError::Usage(format!("margin {} leaves no interior sites", c.margin)));
    }
    let pooled: Vec<f64> = samples.iter().flat_map(|x| sites.iter().map(|&i| x.values[i])).collect();
    out.csv("histogram.csv", histogram(&pooled, c.bins))?;
    out.csv("qq.csv", qq_pairs(&pooled))?;
    // jackknife errors need at least two realizations
    let moments = if samples.len() > 1 {
        let m = empirical_moments(&samples, &sites)?;
        out.json("moments.json", &m)?;
        Some(m)
    } else {
        None
    };

    let rates: Vec<f64> = samples.iter().map(|x| x.acceptance_rate).collect();
    Ok(json!({
        "params": params,
        "grid": grid,
        "interior_sites": sites.len(),
        "acceptance_rate": rates.iter().sum::<f64>() / rates.len() as f64,
        "acceptance_rates": rates,
        "moments": moments,
        "single_site_skewness": single_site_skewness(params.gamma),
        "plan_setup_s": setup_s,
        "realization_s": times,
    }))
}

fn orthant(cfg: &RunConfig, out: &mut OutDir) -> Result<serde_json::Value, CliError> {
    let c = &cfg.orthant;
    if c.dim == 0 {
        return Err(CliError::Usage("dim must be positive".into()));
    }
    if c.n_mc == 0 {
        return Err(CliError::Usage("n must be positive".into()));
    }
    let lower = if c.dim > 1 { -1.0 / (c.dim as f64 - 1.0) } else { -1.0 };
    if !(c.rho > lower && c.rho < 1.0) {
        return Err(CliError::Usage(format!("rho {} gives no valid {}-dimensional correlation", c.rho, c.dim)));
    }
    let cov = Matrix::from_fn(c.dim, c.dim, |i, j| if i == j { 1.0 } else { c.rho });
    let t0 = Instant::now();
    let problem = OrthantProblem::new(vec![c.mean; c.dim], &cov)?;
    let crn = make_crn(cfg.seed, c.n_mc, c.dim)?;
    let est = estimate_orthant(&problem, &crn)?;
    let runtime = t0.elapsed().as_secs_f64();
    let mut report = json!({
        "dim": c.dim,
        "rho": c.rho,
        "mean": c.mean,
        "n": c.n_mc,
        "estimate": est.value(),
        "std_error": est.std_error,
        "log_estimate": est.log_value,
    });
    println!("estimate   {}", est.value());
    println!("std_error  {}", est.std_error);
    if c.oracle {
        if c.rho < 0.0 {
            return Err(CliError::Usage("the quadrature oracle needs rho >= 0".into()));
        }
        let oracle = equicorrelated_orthant(c.dim, c.rho, c.mean)?;
        let z = (est.value() - oracle) / est.std_error;
        println!("oracle     {oracle}");
        println!("z          {z}");
        report["oracle"] = json!(oracle);
        report["z"] = json!(z);
    }
    println!("runtime_s  {runtime}");
    out.json("orthant.json", &report)?;
    Ok(json!({ "runtime_s": runtime }))
}

#[derive(Serialize)]
struct SpreadRow {
    param: String,
    #[serde(rename = "N")]
    n_mc: usize,
    spread: f64,
}

fn estimate(cfg: &RunConfig, out: &mut OutDir) -> Result<serde_json::Value, CliError> {
    let c = &cfg.estimate;
    let mle = MleConfig {
        n_mc: c.n_mc,
        n_starts: c.n_starts,
        crn_seed: c.crn_seed,
        ..MleConfig::default()
    };
    let study = c.study.as_deref();
    if !matches!(study, None | Some("mc-error") | Some("consistency")) {
        return Err(CliError::Usage(format!(
            "study must be mc-error or consistency, got {:?}",
            study.unwrap_or_default()
        )));
    }
    if study == Some("consistency") {
        let truth = case_params(c.case)?;
        let res = consistency_study(&c.p_list, c.n_sims, &truth, c.n_mc, &mle, cfg.seed)?;
        out.csv("consistency.csv", &res.rows)?;
        out.csv("consistency_summary.csv", &res.summaries)?;
        return Ok(json!({
            "truth": truth,
            "clamp_fraction": res.clamp_fraction,
            "failures": res.failures,
            "summaries": res.summaries,
        }));
    }

    let x = realization(cfg)?;
    let t0 = Instant::now();
    let res = fit(&x, &mle)?;
    let fit_s = t0.elapsed().as_secs_f64();
    out.json("estimates.json", &res)?;
    let mut results = json!({
        "p": x.grid.len(),
        "estimates": res.estimates,
        "names": res.names,
        "std_errors": res.std_errors,
        "intervals_90": res.intervals_90,
        "clamped_gamma": res.clamped_gamma,
        "fit_s": fit_s,
    });
    if study == Some("mc-error") {
        let rows = mc_error_study(&x, &c.n_list, c.reps, &mle)?;
        let spread: Vec<SpreadRow> = study_spread(&rows)
            .into_iter()
            .map(|(param, n_mc, spread)| SpreadRow { param, n_mc, spread })
            .collect();
        out.csv("mc_error.csv", &rows)?;
        out.csv("mc_error_spread.csv", &spread)?;
        results["spread"] = json!(spread);
    }
    Ok(results)
}

fn realization(cfg: &RunConfig) -> Result<FieldRealization, CliError> {
    let c = &cfg.estimate;
    if let Some(path) = &c.input {
        return io::read_realization(path);
    }
    let grid = parse_grid(&c.grid)?;
    let model = build_model(case_params(c.case)?, &grid)?;
    Ok(FieldSampler::new(model, SimConfig::default())?.simulate(cfg.seed)?)
}

#[derive(Serialize)]
struct PredRow {
    variable: usize,
    row: usize,
    col: usize,
    median: f64,
    q10: f64,
    q90: f64,
    sd: f64,
}

#[derive(Serialize)]
struct MetricRow {
    model: String,
    variable: usize,
    mae: f64,
    prior_coverage: f64,
    posterior_coverage: f64,
}

#[derive(Serialize)]
struct TruthRow {
    variable: usize,
    row: usize,
    col: usize,
    value: f64,
}

fn site_of(k: usize, grid: &GridSpec) -> (usize, usize, usize) {
    let s = grid.len();
    let (row, col) = grid.coords(k % s);
    (k / s, row, col)
}

fn prediction_rows(pred: &Prediction, grid: &GridSpec) -> Vec<PredRow> {
    (0..pred.median.len())
        .map(|k| {
            let (variable, row, col) = site_of(k, grid);
            PredRow {
                variable,
                row,
                col,
                median: pred.median[k],
                q10: pred.q10[k],
                q90: pred.q90[k],
                sd: pred.sd[k],
            }
        })
        .collect()
}

fn invert(cfg: &RunConfig, out: &mut OutDir) -> Result<serde_json::Value, CliError> {
    let c = &cfg.invert;
    let grid = parse_grid(&c.grid)?;
    let models = &c.models;
    if models.is_empty() {
        return Err(CliError::Usage("no model selected".into()));
    }
    if let Some(m) = models.iter().find(|m| !matches!(m.as_str(), "csn" | "gaussian")) {
        return Err(CliError::Usage(format!("model must be csn or gaussian, got {m:?}")));
    }
    let survey = Survey {
        n_vars: c.n_vars,
        angles: c.angles.clone(),
        wavelet: c.wavelet.clone(),
        background: c.background,
    };
    let truth = c.truth.clone().unwrap_or_else(|| default_truth(c.n_vars));
    if truth.n_vars() != c.n_vars {
        return Err(CliError::Usage(format!(
            "truth has {} variables, n_vars is {}",
            truth.n_vars(),
            c.n_vars
        )));
    }
    if c.well_col >= grid.n_cols {
        return Err(CliError::Usage(format!("well_col {} outside {} columns", c.well_col, grid.n_cols)));
    }

    let (d, well, m_true) = if c.synth {
        let s = synth_data(&truth, &survey, &grid, c.delta, cfg.seed, Some(c.well_col))?;
        let well = s.well.expect("well column requested");
        out.csv("observations.csv", io::observation_rows(&s.d, &grid))?;
        out.csv("well.csv", io::well_rows(&well.values, grid.n_rows))?;
        let rows = s.m.iter().enumerate().map(|(k, &value)| {
            let (variable, row, col) = site_of(k, &grid);
            TruthRow { variable, row, col, value }
        });
        out.csv("truth.csv", rows)?;
        (s.d, Some(well), Some(s.m))
    } else {
        let path = c
            .obs
            .as_ref()
            .ok_or_else(|| CliError::Usage("invert needs --obs or --synth".into()))?;
        let d = io::read_observations(path, &grid, c.angles.len())?;
        let well = match &c.well {
            Some(p) => Some(WellColumn {
                col: c.well_col,
                values: io::read_well(p, grid.n_rows, c.n_vars)?,
            }),
            None => None,
        };
        (d, well, None)
    };
    if c.eval && m_true.is_none() {
        return Err(CliError::Usage("--eval needs --synth (no truth to score against)".into()));
    }
    if (c.fit || c.with_well) && well.is_none() {
        return Err(CliError::Usage("fitting and well conditioning need a well log".into()));
    }

    let pcfg = PredictConfig {
        n_samples: c.n_samples,
        seed: cfg.seed,
        n_chains: c.n_chains,
        ..PredictConfig::default()
    };
    let mut metric_rows = Vec::new();
    let mut per_model = serde_json::Map::new();
    for model in models {
        let gaussian = model == "gaussian";
        let t0 = Instant::now();
        let mut start = truth.clone();
        if gaussian {
            start.gamma = vec![0.0; c.n_vars];
        }
        let (theta, prior, fit_info) = if c.fit {
            let hcfg = HyperFitConfig {
                n_mc: c.n_mc,
                crn_seed: cfg.seed,
                window: c.window,
                fit_error: c.fit_error,
                gaussian,
                delta: c.delta,
                ..HyperFitConfig::default()
            };
            let well = well.as_ref().expect("checked above");
            let f = fit_hyperparams(&d, well, &survey, &grid, &start, &hcfg)?;
            let prior = f.prior_on(&grid, c.delta)?;
            let info = json!({
                "loglik": f.loglik,
                "window_cols": f.window_cols,
                "evaluations": f.evaluations,
                "converged": f.converged,
            });
            (f.theta, prior, info)
        } else {
            let prior = start.prior(&grid, c.delta)?;
            (start, prior, serde_json::Value::Null)
        };
        let fit_s = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let obs = theta.obs_model(&survey, &grid, d.clone())?;
        let mut post = posterior_csn(&prior, &obs)?;
        if c.with_well {
            let w = well.as_ref().expect("checked above").well_data(&grid, c.n_vars)?;
            post = condition_on_well(&post, &w)?;
        }
        let pred = if gaussian {
            gaussian_prediction(&post)?
        } else {
            predict(&post, &pcfg)?
        };
        let predict_s = t1.elapsed().as_secs_f64();
        out.csv(&format!("predictions_{model}.csv"), prediction_rows(&pred, &grid))?;

        let mut entry = json!({
            "theta": theta,
            "fit": fit_info,
            "acceptance_rate": pred.acceptance_rate,
            "fit_s": fit_s,
            "predict_s": predict_s,
        });
        if let Some(m) = &m_true {
            let bands = prior_bands(&prior, &pcfg)?;
            let met = evaluate(&pred, m, Some(&bands), c.n_vars)?;
            for v in 0..c.n_vars {
                metric_rows.push(MetricRow {
                    model: model.clone(),
                    variable: v,
                    mae: met.mae[v],
                    prior_coverage: met.prior_coverage.as_ref().map_or(f64::NAN, |p| p[v]),
                    posterior_coverage: met.posterior_coverage[v],
                });
            }
            entry["metrics"] = json!(met);
        }
        per_model.insert(model.clone(), entry);
    }
    if c.eval {
        out.csv("metrics.csv", &metric_rows)?;
    }
    Ok(json!({
        "grid": grid,
        "n_vars": c.n_vars,
        "seed": cfg.seed,
        "models": per_model,
    }))
}


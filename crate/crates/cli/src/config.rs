//! Run configuration: defaults, then a TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skewfield::field::CsnParams;
use skewfield::inversion::{Background, DeltaForm, Hyper, Wavelet};
use skewfield::GridSpec;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub out: PathBuf,
    pub simulate: SimulateConfig,
    pub orthant: OrthantConfig,
    pub estimate: EstimateConfig,
    pub invert: InvertConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: 0,
            out: PathBuf::from("out"),
            simulate: SimulateConfig::default(),
            orthant: OrthantConfig::default(),
            estimate: EstimateConfig::default(),
            invert: InvertConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Parameter case 1..=6; ignored when `params` is set.
    pub case: u32,
    pub params: Option<CsnParams>,
    pub grid: String,
    pub realizations: usize,
    pub n_a: usize,
    pub updates_per_set: usize,
    pub bins: usize,
    /// Sites this close to the border are left out of pooled summaries.
    pub margin: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            case: 1,
            params: None,
            grid: "50x50".into(),
            realizations: 1,
            n_a: 100,
            updates_per_set: 40,
            bins: 40,
            margin: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrthantConfig {
    pub dim: usize,
    /// Common correlation of the unit-variance problem.
    pub rho: f64,
    /// Common mean.
    pub mean: f64,
    pub n_mc: usize,
    pub oracle: bool,
}

impl Default for OrthantConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            rho: 0.5,
            mean: 0.0,
            n_mc: 50_000,
            oracle: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    /// Realization CSV (`row,col,value`); simulated from `case` when absent.
    pub input: Option<PathBuf>,
    pub case: u32,
    pub grid: String,
    pub n_mc: usize,
    pub n_starts: usize,
    pub crn_seed: u64,
    /// `mc-error` or `consistency`.
    pub study: Option<String>,
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub p_list: Vec<usize>,
    pub n_sims: usize,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            input: None,
            case: 1,
            grid: "30x30".into(),
            n_mc: 1000,
            n_starts: 3,
            crn_seed: 1,
            study: None,
            n_list: vec![100, 1000],
            reps: 8,
            p_list: vec![25, 100, 225],
            n_sims: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertConfig {
    pub synth: bool,
    /// Any of `csn`, `gaussian`.
    pub models: Vec<String>,
    pub with_well: bool,
    pub eval: bool,
    /// Observation CSV (`angle,trace,time,value`).
    pub obs: Option<PathBuf>,
    /// Well CSV (`variable,time,value`).
    pub well: Option<PathBuf>,
    pub well_col: usize,
    pub grid: String,
    pub n_vars: usize,
    pub angles: Vec<f64>,
    pub wavelet: Wavelet,
    pub background: Background,
    pub delta: DeltaForm,
    /// Synthetic truth, also the starting point (and fixed error model) of fits.
    pub truth: Option<Hyper>,
    /// Estimate hyperparameters; otherwise use `truth` as given.
    pub fit: bool,
    pub fit_error: bool,
    pub window: usize,
    pub n_mc: usize,
    pub n_samples: usize,
    pub n_chains: usize,
}

impl Default for InvertConfig {
    fn default() -> Self {
        Self {
            synth: false,
            models: vec!["csn".into()],
            with_well: false,
            eval: false,
            obs: None,
            well: None,
            well_col: 6,
            grid: "25x12".into(),
            n_vars: 1,
            angles: vec![12.0, 22.0, 31.0],
            wavelet: Wavelet::default(),
            background: Background::default(),
            delta: DeltaForm::default(),
            truth: None,
            fit: true,
            fit_error: false,
            window: 4,
            n_mc: 500,
            n_samples: 1000,
            n_chains: 4,
        }
    }
}

/// Synthetic truth used when the config gives none.
pub fn default_truth(n_vars: usize) -> Hyper {
    if n_vars == 3 {
        Hyper {
            sigma2_e: 0.002,
            error_ranges: [1.0, 1.0, 2.0],
            mu0: vec![0.0; 3],
            sigma0: vec![
                vec![0.01, 0.006, 0.002],
                vec![0.006, 0.016, 0.002],
                vec![0.002, 0.002, 0.004],
            ],
            gamma: vec![0.975, 0.975, -0.975],
            d_h: 3.0,
            d_v: 3.0,
        }
    } else {
        Hyper {
            sigma2_e: 0.002,
            error_ranges: [1.0, 1.0, 2.0],
            mu0: vec![0.0],
            sigma0: vec![vec![0.01]],
            gamma: vec![0.975],
            d_h: 3.0,
            d_v: 3.0,
        }
    }
}

/// Parses `ROWSxCOLS` into a unit-spaced grid.
pub fn parse_grid(s: &str) -> Result<GridSpec, CliError> {
    let bad = || CliError::Usage(format!("grid must look like 50x50, got {s:?}"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let r: usize = r.trim().parse().map_err(|_| bad())?;
    let c: usize = c.trim().parse().map_err(|_| bad())?;
    GridSpec::unit(r, c).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

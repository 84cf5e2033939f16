mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

/// Closed skew-normal random fields: simulation, likelihood fitting and
/// Bayesian inversion experiments.
#[derive(Debug, Parser)]
#[command(name = "skewfield", version)]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, env = "SKEWFIELD_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate realizations and pooled marginal summaries.
    Simulate(SimulateArgs),
    /// Estimate an equicorrelated orthant probability.
    Orthant(OrthantArgs),
    /// Maximum-likelihood fit and Monte Carlo studies.
    Estimate(EstimateArgs),
    /// Predict a property field from angle-stack observations.
    Invert(InvertArgs),
    /// Re-run the command recorded in a manifest.
    Replay {
        manifest: PathBuf,
    },
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    case: Option<u32>,
    /// Grid as ROWSxCOLS.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    realizations: Option<usize>,
    #[arg(long = "n-a")]
    n_a: Option<usize>,
}

#[derive(Debug, Args)]
struct OrthantArgs {
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    rho: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    mean: Option<f64>,
    /// Monte Carlo sample size.
    #[arg(long)]
    n: Option<usize>,
    /// Compare with one-dimensional quadrature.
    #[arg(long)]
    oracle: bool,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Realization CSV (row,col,value).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    case: Option<u32>,
    #[arg(long)]
    grid: Option<String>,
    /// Monte Carlo sample size of the fit.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "n-starts")]
    n_starts: Option<usize>,
    /// mc-error or consistency.
    #[arg(long)]
    study: Option<String>,
    /// Sample sizes of the mc-error study.
    #[arg(long = "N", value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    #[arg(long)]
    reps: Option<usize>,
    /// Field sizes of the consistency study.
    #[arg(long = "p", value_delimiter = ',')]
    p_list: Option<Vec<usize>>,
    #[arg(long = "n-sims")]
    n_sims: Option<usize>,
}

#[derive(Debug, Args)]
struct InvertArgs {
    /// Generate truth and data from the configured hyperparameters.
    #[arg(long)]
    synth: bool,
    /// csn or gaussian; repeat for both.
    #[arg(long = "model")]
    models: Vec<String>,
    #[arg(long = "with-well")]
    with_well: bool,
    /// Score predictions against the synthetic truth.
    #[arg(long)]
    eval: bool,
    /// Observation CSV (angle,trace,time,value).
    #[arg(long)]
    obs: Option<PathBuf>,
    /// Well CSV (variable,time,value).
    #[arg(long)]
    well: Option<PathBuf>,
    #[arg(long = "well-col")]
    well_col: Option<usize>,
    #[arg(long)]
    grid: Option<String>,
    /// Use the configured hyperparameters without fitting.
    #[arg(long = "no-fit")]
    no_fit: bool,
    #[arg(long = "n-samples")]
    n_samples: Option<usize>,
}

fn overlay(cli: &Cli, cfg: &mut RunConfig) {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    match &cli.command {
        Command::Simulate(a) => {
            let c = &mut cfg.simulate;
            if let Some(v) = a.case {
                c.case = v;
                c.params = None;
            }
            if let Some(v) = &a.grid {
                c.grid = v.clone();
            }
            if let Some(v) = a.realizations {
                c.realizations = v;
            }
            if let Some(v) = a.n_a {
                c.n_a = v;
            }
        }
        Command::Orthant(a) => {
            let c = &mut cfg.orthant;
            if let Some(v) = a.dim {
                c.dim = v;
            }
            if let Some(v) = a.rho {
                c.rho = v;
            }
            if let Some(v) = a.mean {
                c.mean = v;
            }
            if let Some(v) = a.n {
                c.n_mc = v;
            }
            c.oracle |= a.oracle;
        }
        Command::Estimate(a) => {
            let c = &mut cfg.estimate;
            if let Some(v) = &a.input {
                c.input = Some(v.clone());
            }
            if let Some(v) = a.case {
                c.case = v;
            }
            if let Some(v) = &a.grid {
                c.grid = v.clone();
            }
            if let Some(v) = a.n {
                c.n_mc = v;
            }
            if let Some(v) = a.n_starts {
                c.n_starts = v;
            }
            if let Some(v) = &a.study {
                c.study = Some(v.clone());
            }
            if let Some(v) = &a.n_list {
                c.n_list = v.clone();
            }
            if let Some(v) = a.reps {
                c.reps = v;
            }
            if let Some(v) = &a.p_list {
                c.p_list = v.clone();
            }
            if let Some(v) = a.n_sims {
                c.n_sims = v;
            }
        }
        Command::Invert(a) => {
            let c = &mut cfg.invert;
            c.synth |= a.synth;
            if !a.models.is_empty() {
                c.models = a.models.clone();
            }
            c.with_well |= a.with_well;
            c.eval |= a.eval;
            if let Some(v) = &a.obs {
                c.obs = Some(v.clone());
            }
            if let Some(v) = &a.well {
                c.well = Some(v.clone());
            }
            if let Some(v) = a.well_col {
                c.well_col = v;
            }
            if let Some(v) = &a.grid {
                c.grid = v.clone();
            }
            if a.no_fit {
                c.fit = false;
            }
            if let Some(v) = a.n_samples {
                c.n_samples = v;
            }
        }
        Command::Replay { .. } => {}
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, cfg) = match &cli.command {
        Command::Replay { manifest } => {
            let m = io::read_manifest(manifest)?;
            let mut cfg = m.config;
            if let Some(t) = cli.threads {
                cfg.threads = t;
            }
            if let Some(o) = &cli.out {
                cfg.out = o.clone();
            }
            (m.command, cfg)
        }
        cmd => {
            let mut cfg = config::load(cli.config.as_deref())?;
            overlay(&cli, &mut cfg);
            let name = match cmd {
                Command::Simulate(_) => "simulate",
                Command::Orthant(_) => "orthant",
                Command::Estimate(_) => "estimate",
                Command::Invert(_) => "invert",
                Command::Replay { .. } => unreachable!(),
            };
            (name.to_string(), cfg)
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| commands::dispatch(&name, &cfg))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("skewfield: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

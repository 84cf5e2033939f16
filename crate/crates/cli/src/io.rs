//! CSV and manifest files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skewfield::field::FieldRealization;
use skewfield::GridSpec;

use crate::config::RunConfig;
use crate::error::CliError;

/// Run record written next to the outputs; `config` is fully resolved.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub outputs: Vec<String>,
    pub results: serde_json::Value,
    pub runtime_s: f64,
}

pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::Data(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn csv<S: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = S>) -> Result<(), CliError> {
        let path = self.root.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<(), CliError> {
        let path = self.root.join(name);
        fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn manifest(self, command: &str, config: &RunConfig, results: serde_json::Value, runtime_s: f64) -> Result<(), CliError> {
        let m = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            outputs: self.written,
            results,
            runtime_s,
        };
        fs::write(self.root.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SiteValue {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

pub fn realization_rows(x: &FieldRealization) -> Vec<SiteValue> {
    (0..x.grid.len())
        .map(|i| {
            let (row, col) = x.grid.coords(i);
            SiteValue { row, col, value: x.values[i] }
        })
        .collect()
}

fn open(path: &Path) -> Result<csv::Reader<fs::File>, CliError> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Reads rows of `T`, reporting the file line of the first malformed row.
fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut rd = open(path)?;
    let mut out = Vec::new();
    for rec in rd.deserialize::<T>() {
        match rec {
            Ok(r) => out.push(r),
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(CliError::Data(format!("{} line {line}: {e}", path.display())));
            }
        }
    }
    Ok(out)
}

/// Reads a `row,col,value` realization; every site must appear once.
pub fn read_realization(path: &Path) -> Result<FieldRealization, CliError> {
    let rows: Vec<SiteValue> = read_rows(path)?;
    let n_rows = rows.iter().map(|r| r.row + 1).max().unwrap_or(0);
    let n_cols = rows.iter().map(|r| r.col + 1).max().unwrap_or(0);
    let grid = GridSpec::unit(n_rows, n_cols).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut values = vec![f64::NAN; grid.len()];
    for r in &rows {
        let i = grid.index(r.row, r.col);
        if !values[i].is_nan() {
            return Err(CliError::Data(format!("{}: site ({}, {}) repeated", path.display(), r.row, r.col)));
        }
        values[i] = r.value;
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Data(format!("{}: missing or non-finite sites", path.display())));
    }
    Ok(FieldRealization {
        grid,
        values,
        seed: 0,
        acceptance_rate: f64::NAN,
        n_steps: 0,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ObsRow {
    pub angle: usize,
    pub trace: usize,
    pub time: usize,
    pub value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WellRow {
    pub variable: usize,
    pub time: usize,
    pub value: f64,
}

/// Reads observations into angle-major order on `grid`.
pub fn read_observations(path: &Path, grid: &GridSpec, n_angles: usize) -> Result<Vec<f64>, CliError> {
    let rows: Vec<ObsRow> = read_rows(path)?;
    let s = grid.len();
    let mut d = vec![f64::NAN; n_angles * s];
    for r in &rows {
        if r.angle >= n_angles || r.trace >= grid.n_cols || r.time >= grid.n_rows {
            return Err(CliError::Data(format!(
                "{}: observation ({}, {}, {}) outside {n_angles} angles on a {}x{} grid",
                path.display(),
                r.angle,
                r.trace,
                r.time,
                grid.n_rows,
                grid.n_cols
            )));
        }
        d[r.angle * s + grid.index(r.time, r.trace)] = r.value;
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Data(format!("{}: incomplete observation set", path.display())));
    }
    Ok(d)
}

pub fn observation_rows(d: &[f64], grid: &GridSpec) -> Vec<ObsRow> {
    let s = grid.len();
    d.iter()
        .enumerate()
        .map(|(k, &value)| {
            let (time, trace) = grid.coords(k % s);
            ObsRow { angle: k / s, trace, time, value }
        })
        .collect()
}

/// Reads a well log into variable-major order.
pub fn read_well(path: &Path, n_rows: usize, n_vars: usize) -> Result<Vec<f64>, CliError> {
    let rows: Vec<WellRow> = read_rows(path)?;
    let mut v = vec![f64::NAN; n_rows * n_vars];
    for r in &rows {
        if r.variable >= n_vars || r.time >= n_rows {
            return Err(CliError::Data(format!(
                "{}: well entry ({}, {}) outside {n_vars} variables x {n_rows} samples",
                path.display(),
                r.variable,
                r.time
            )));
        }
        v[r.variable * n_rows + r.time] = r.value;
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CliError::Data(format!("{}: incomplete well log", path.display())));
    }
    Ok(v)
}

pub fn well_rows(values: &[f64], n_rows: usize) -> Vec<WellRow> {
    values
        .iter()
        .enumerate()
        .map(|(k, &value)| WellRow {
            variable: k / n_rows,
            time: k % n_rows,
            value,
        })
        .collect()
}

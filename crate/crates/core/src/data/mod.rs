//! Synthetic truth, measurement noise, sensor subsampling, collocation
//! sampling and dataset files.

mod sampling;
pub mod solver;

pub use sampling::{lhs_points, sobol_points, CollocationSet, Sampler};

use crate::library::AnalyticField;
use crate::points::PointSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use solver::{integrate, BurgersProblem, Tolerance};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("dataset has no samples")]
    Empty,
    #[error("requested {requested} {what} but only {available} available")]
    Oversubscribed {
        what: &'static str,
        requested: usize,
        available: usize,
    },
    #[error("solver unstable at t = {time}: {message}")]
    Unstable { time: f64, message: String },
    #[error("invalid generator spec: {0}")]
    Invalid(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Layout of a full-grid dataset: rows are ordered by spatial location, then
/// by time (`row = s * times + j`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub spatial: usize,
    pub times: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub fields: Vec<String>,
    pub coords: Vec<String>,
    /// `[lower, upper]` per coordinate.
    pub domain: Vec<[f64; 2]>,
    pub noise_level: f64,
    /// Seed of the noise draw, if any.
    pub seed: Option<u64>,
    pub generator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor_seed: Option<u64>,
}

/// Measured (or generated) samples `coords -> values`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldDataset {
    pub points: PointSet,
    /// Row-major `len() x fields` values.
    pub values: Vec<f64>,
    pub meta: DatasetMeta,
}

impl FieldDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_fields(&self) -> usize {
        self.meta.fields.len()
    }

    pub fn value_row(&self, i: usize) -> &[f64] {
        let n = self.n_fields();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn subset(&self, idx: &[usize]) -> FieldDataset {
        let n = self.n_fields();
        let mut values = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            values.extend_from_slice(self.value_row(i));
        }
        FieldDataset {
            points: self.points.subset(idx),
            values,
            meta: DatasetMeta {
                grid: None,
                ..self.meta.clone()
            },
        }
    }

    pub fn domain_bounds(&self) -> Vec<(f64, f64)> {
        self.meta.domain.iter().map(|b| (b[0], b[1])).collect()
    }

    /// Root-mean-square of one field component.
    pub fn rms(&self, component: usize) -> f64 {
        let n = self.n_fields();
        let ss: f64 = self.values.iter().skip(component).step_by(n).map(|v| v * v).sum();
        (ss / self.len().max(1) as f64).sqrt()
    }

    /// Population standard deviation of all stacked values.
    pub fn std(&self) -> f64 {
        let m = self.values.len().max(1) as f64;
        let mean = self.values.iter().sum::<f64>() / m;
        (self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    BurgersFd,
    AdvectionAnalytic,
    DiffusionAnalytic,
    BurgersSourceFd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    /// `amplitude * exp(-(x - center)^2 / (2 width^2))`; `None` picks the domain
    /// center and a sixteenth of the domain length.
    Gaussian {
        #[serde(default)]
        center: Option<f64>,
        #[serde(default)]
        width: Option<f64>,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// `amplitude * sin(2 pi periods (x - lower) / length)`.
    Sine {
        #[serde(default = "one_u32")]
        periods: u32,
        #[serde(default = "one")]
        amplitude: f64,
    },
    Zero,
}

fn one() -> f64 {
    1.0
}

fn one_u32() -> u32 {
    1
}

impl Default for InitialCondition {
    fn default() -> Self {
        InitialCondition::Gaussian {
            center: None,
            width: None,
            amplitude: 1.0,
        }
    }
}

/// Sine mode `amplitude * sin(k x)` of the analytic diffusion field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub k: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub model: Model,
    #[serde(default = "default_nu")]
    pub nu: f64,
    /// Advection speed.
    #[serde(default = "one")]
    pub c: f64,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    /// Amplitude of the `sin(x) sin(t)` forcing (forced Burgers only).
    #[serde(default = "one")]
    pub source_amplitude: f64,
    #[serde(default)]
    pub initial: InitialCondition,
    pub nx: usize,
    pub nt: usize,
    /// Periodic spatial interval `[lower, upper)`.
    pub x_range: (f64, f64),
    pub t_range: (f64, f64),
    /// Solver grid refinement relative to `nx` (at least 4).
    #[serde(default = "default_oversample")]
    pub oversample: usize,
}

fn default_nu() -> f64 {
    0.1
}

fn default_modes() -> Vec<Mode> {
    vec![Mode { k: 1.0, amplitude: 1.0 }]
}

fn default_oversample() -> usize {
    4
}

impl GeneratorSpec {
    /// Burgers with viscosity `nu` on `[-8, 8) x [0, 10]`, 256 x 101 grid,
    /// Gaussian initial condition.
    pub fn burgers(nu: f64) -> Self {
        GeneratorSpec {
            model: Model::BurgersFd,
            nu,
            c: 1.0,
            modes: default_modes(),
            source_amplitude: 1.0,
            initial: InitialCondition::default(),
            nx: 256,
            nt: 101,
            x_range: (-8.0, 8.0),
            t_range: (0.0, 10.0),
            oversample: 4,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self.model {
            Model::BurgersFd => "burgers_fd",
            Model::AdvectionAnalytic => "advection_analytic",
            Model::DiffusionAnalytic => "diffusion_analytic",
            Model::BurgersSourceFd => "burgers_source_fd",
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        let solver = matches!(self.model, Model::BurgersFd | Model::BurgersSourceFd);
        if self.nx < 2 || self.nt < 2 {
            return bad(format!("grid {} x {} is too small", self.nx, self.nt));
        }
        if solver && (self.nx < 64 || self.nt < 2) {
            return bad(format!("solver models need at least 64 spatial points, got {}", self.nx));
        }
        if solver && self.oversample < 4 {
            return bad(format!("oversample must be at least 4, got {}", self.oversample));
        }
        if !(self.x_range.1 > self.x_range.0) || !(self.t_range.1 > self.t_range.0) {
            return bad("empty domain".into());
        }
        if !(self.nu >= 0.0) || !self.nu.is_finite() {
            return bad(format!("viscosity must be non-negative, got {}", self.nu));
        }
        if self.model == Model::DiffusionAnalytic && self.modes.is_empty() {
            return bad("diffusion needs at least one mode".into());
        }
        Ok(())
    }

    pub fn x_grid(&self) -> Vec<f64> {
        let (lo, hi) = self.x_range;
        (0..self.nx).map(|i| lo + (hi - lo) * i as f64 / self.nx as f64).collect()
    }

    pub fn t_grid(&self) -> Vec<f64> {
        let (lo, hi) = self.t_range;
        (0..self.nt).map(|j| lo + (hi - lo) * j as f64 / (self.nt - 1) as f64).collect()
    }

    fn initial_value(&self, x: f64) -> f64 {
        let (lo, hi) = self.x_range;
        let len = hi - lo;
        match self.initial {
            InitialCondition::Gaussian { center, width, amplitude } => {
                let c = center.unwrap_or(0.5 * (lo + hi));
                let w = width.unwrap_or(len / 16.0);
                amplitude * (-(x - c).powi(2) / (2.0 * w * w)).exp()
            }
            InitialCondition::Sine { periods, amplitude } => {
                amplitude * (2.0 * PI * periods as f64 * (x - lo) / len).sin()
            }
            InitialCondition::Zero => 0.0,
        }
    }

    /// The closed-form field of the analytic models.
    pub fn analytic_field(&self) -> Option<AnalyticField> {
        match self.model {
            Model::AdvectionAnalytic => Some(AnalyticField::advection(self.c)),
            Model::DiffusionAnalytic => Some(AnalyticField::diffusion_modes(
                self.nu,
                &self.modes.iter().map(|m| (m.k, m.amplitude)).collect::<Vec<_>>(),
            )),
            _ => None,
        }
    }
}

/// Solves the periodic Burgers problem on `n` points over `[lower, upper)` and
/// returns the state at `times`, one vector per time.
pub fn solve_burgers(spec: &GeneratorSpec, n: usize, times: &[f64]) -> Result<Vec<Vec<f64>>, DataError> {
    let (lo, hi) = spec.x_range;
    let h = (hi - lo) / n as f64;
    let u0: Vec<f64> = (0..n).map(|i| spec.initial_value(lo + i as f64 * h)).collect();
    let amp = spec.source_amplitude;
    let forcing = move |x: f64, t: f64| amp * x.sin() * t.sin();
    let problem = BurgersProblem {
        nu: spec.nu,
        x_lower: lo,
        length: hi - lo,
        forcing: if spec.model == Model::BurgersSourceFd {
            Some(&forcing)
        } else {
            None
        },
    };
    integrate(&problem, &u0, times, &Tolerance::default())
}

/// Full-grid truth on the `nx x nt` output grid.
pub fn generate(spec: &GeneratorSpec) -> Result<FieldDataset, DataError> {
    spec.validate()?;
    let xs = spec.x_grid();
    let ts = spec.t_grid();
    let mut grid = vec![vec![0.0; spec.nt]; spec.nx];
    match spec.model {
        Model::BurgersFd | Model::BurgersSourceFd => {
            let fine = spec.nx * spec.oversample;
            let states = solve_burgers(spec, fine, &ts)?;
            for (j, state) in states.iter().enumerate() {
                for (i, row) in grid.iter_mut().enumerate() {
                    row[j] = state[i * spec.oversample];
                }
            }
        }
        Model::AdvectionAnalytic | Model::DiffusionAnalytic => {
            let field = spec.analytic_field().expect("analytic model");
            for (i, row) in grid.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = field.value(&[xs[i], ts[j]], 0);
                }
            }
        }
    }
    let mut coords = Vec::with_capacity(2 * spec.nx * spec.nt);
    let mut values = Vec::with_capacity(spec.nx * spec.nt);
    for (i, &x) in xs.iter().enumerate() {
        for (j, &t) in ts.iter().enumerate() {
            coords.extend_from_slice(&[x, t]);
            values.push(grid[i][j]);
        }
    }
    Ok(FieldDataset {
        points: PointSet::new(2, coords),
        values,
        meta: DatasetMeta {
            fields: vec!["u".into()],
            coords: vec!["x".into(), "t".into()],
            domain: vec![[spec.x_range.0, spec.x_range.1], [spec.t_range.0, spec.t_range.1]],
            noise_level: 0.0,
            seed: None,
            generator: spec.tag().into(),
            grid: Some(GridShape {
                spatial: spec.nx,
                times: spec.nt,
            }),
            sensor_seed: None,
        },
    })
}

/// Adds Gaussian noise with standard deviation `level * RMS` per component.
pub fn add_noise(data: &FieldDataset, level: f64, seed: u64) -> FieldDataset {
    assert!(level >= 0.0, "noise level must be non-negative");
    let mut out = data.clone();
    out.meta.noise_level = level;
    out.meta.seed = Some(seed);
    if level == 0.0 {
        return out;
    }
    let n = data.n_fields();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in 0..n {
        let sd = level * data.rms(c);
        if sd == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, sd).expect("finite deviation");
        for v in out.values.iter_mut().skip(c).step_by(n) {
            *v += normal.sample(&mut rng);
        }
    }
    out
}

/// Keeps `n_sensors` randomly chosen spatial locations of a full-grid dataset
/// and `n_times` uniformly spaced time steps at each.
pub fn subsample_sensors(data: &FieldDataset, n_sensors: usize, n_times: usize, seed: u64) -> Result<FieldDataset, DataError> {
    let grid = data
        .meta
        .grid
        .ok_or_else(|| DataError::Schema("sensor subsampling needs a full-grid dataset".into()))?;
    if n_sensors > grid.spatial || n_sensors == 0 {
        return Err(DataError::Oversubscribed {
            what: "sensors",
            requested: n_sensors,
            available: grid.spatial,
        });
    }
    if n_times > grid.times || n_times == 0 {
        return Err(DataError::Oversubscribed {
            what: "time steps",
            requested: n_times,
            available: grid.times,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sensors = rand::seq::index::sample(&mut rng, grid.spatial, n_sensors).into_vec();
    sensors.sort_unstable();
    let steps: Vec<usize> = if n_times == grid.times {
        (0..grid.times).collect()
    } else if n_times == 1 {
        vec![0]
    } else {
        (0..n_times)
            .map(|j| ((j as f64 * (grid.times - 1) as f64) / (n_times - 1) as f64).round() as usize)
            .collect()
    };
    let idx: Vec<usize> = sensors
        .iter()
        .flat_map(|&s| steps.iter().map(move |&j| s * grid.times + j))
        .collect();
    let mut out = data.subset(&idx);
    out.meta.sensor_seed = Some(seed);
    if n_sensors == grid.spatial && n_times == grid.times {
        out.meta.grid = data.meta.grid;
    }
    Ok(out)
}

pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the CSV (`x[,y],t,u[,v...]`, 17 significant digits) and the meta
/// sidecar next to it.
pub fn write_dataset(data: &FieldDataset, path: &Path) -> Result<(), DataError> {
    write_csv(data, path)?;
    let meta = serde_json::to_string_pretty(&data.meta).expect("meta serializes");
    let mp = meta_path(path);
    std::fs::write(&mp, meta + "\n").map_err(io_err(&mp))
}

/// Writes only the CSV; reading it back infers the meta.
pub fn write_csv(data: &FieldDataset, path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let header: Vec<&str> = data
        .meta
        .coords
        .iter()
        .chain(&data.meta.fields)
        .map(String::as_str)
        .collect();
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for i in 0..data.len() {
        let rec: Vec<String> = data
            .points
            .row(i)
            .iter()
            .chain(data.value_row(i))
            .map(|v| format!("{v:.16e}"))
            .collect();
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_io(path: &Path, e: csv::Error) -> DataError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => DataError::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Reads a dataset CSV. Columns up to and including `t` are coordinates, the
/// rest are fields. The meta sidecar is used when present.
pub fn read_dataset(path: &Path) -> Result<FieldDataset, DataError> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_io(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let t_col = header
        .iter()
        .position(|h| h == "t")
        .ok_or_else(|| DataError::Schema(format!("no `t` column in header {header:?}")))?;
    if t_col + 1 >= header.len() {
        return Err(DataError::Schema("no field columns after `t`".into()));
    }
    let dim = t_col + 1;
    let n = header.len() - dim;
    let mut coords = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(DataError::Parse {
                line,
                message: format!("expected {} columns, found {}", header.len(), rec.len()),
            });
        }
        for (k, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                line,
                message: format!("column `{}`: `{cell}` is not a number", header[k]),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line,
                    message: format!("column `{}`: non-finite value", header[k]),
                });
            }
            if k < dim {
                coords.push(v);
            } else {
                values.push(v);
            }
        }
    }
    if coords.is_empty() {
        return Err(DataError::Empty);
    }
    let points = PointSet::new(dim, coords);
    let mp = meta_path(path);
    let meta = if mp.exists() {
        let text = std::fs::read_to_string(&mp).map_err(io_err(&mp))?;
        let meta: DatasetMeta =
            serde_json::from_str(&text).map_err(|e| DataError::Schema(format!("{}: {e}", mp.display())))?;
        if meta.fields.len() != n || meta.coords.len() != dim {
            return Err(DataError::Schema(format!(
                "{} describes {} coordinates and {} fields; CSV has {dim} and {n}",
                mp.display(),
                meta.coords.len(),
                meta.fields.len()
            )));
        }
        meta
    } else {
        let domain = (0..dim)
            .map(|d| {
                let (lo, hi) = points
                    .rows()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[d]), hi.max(r[d])));
                [lo, hi]
            })
            .collect();
        DatasetMeta {
            fields: header[dim..].to_vec(),
            coords: header[..dim].to_vec(),
            domain,
            noise_level: 0.0,
            seed: None,
            generator: "file".into(),
            grid: None,
            sensor_seed: None,
        }
    };
    Ok(FieldDataset { points, values, meta })
}

//! Ridge regression, sequential-threshold ridge (STRidge) and the validation
//! driven threshold search used between network updates.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SparseRegError {
    #[error("normal equations are singular (rank-deficient system with zero ridge penalty)")]
    RankDeficient,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Coefficients of one output component with an explicit support mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCoeffs {
    pub values: Vec<f64>,
    pub support: Vec<bool>,
}

impl SparseCoeffs {
    pub fn zeros(len: usize) -> Self {
        SparseCoeffs {
            values: vec![0.0; len],
            support: vec![false; len],
        }
    }

    /// Support is every nonzero entry.
    pub fn from_values(values: Vec<f64>) -> Self {
        let support = values.iter().map(|v| *v != 0.0).collect();
        SparseCoeffs { values, support }
    }

    /// Keeps `values` only where `support` is set.
    pub fn masked(mut values: Vec<f64>, support: Vec<bool>) -> Self {
        for (v, &s) in values.iter_mut().zip(&support) {
            if !s {
                *v = 0.0;
            }
        }
        SparseCoeffs { values, support }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.support.iter().filter(|s| **s).count()
    }

    pub fn is_zero(&self) -> bool {
        self.nnz() == 0
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.support[j]).collect()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StridgeConfig {
    pub ridge_penalty: f64,
    pub max_iterations: usize,
}

impl Default for StridgeConfig {
    fn default() -> Self {
        StridgeConfig {
            ridge_penalty: 1e-5,
            max_iterations: 10,
        }
    }
}

/// `argmin ||phi lambda - udot||^2 + penalty ||lambda||^2` via the normal
/// equations and a Cholesky factorization.
pub fn ridge_solve(phi: &DMatrix<f64>, udot: &DVector<f64>, penalty: f64) -> Result<DVector<f64>, SparseRegError> {
    if phi.nrows() != udot.len() {
        return Err(SparseRegError::Dimension(format!(
            "phi has {} rows, udot has {}",
            phi.nrows(),
            udot.len()
        )));
    }
    let normal = Normal::new(phi, udot);
    let all: Vec<usize> = (0..phi.ncols()).collect();
    normal.solve(&all, penalty)
}

/// Gram matrix and right-hand side, so ridge solves on column subsets do not
/// touch the tall matrix again.
struct Normal {
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl Normal {
    fn new(phi: &DMatrix<f64>, udot: &DVector<f64>) -> Normal {
        Normal {
            gram: phi.tr_mul(phi),
            rhs: phi.tr_mul(udot),
        }
    }

    fn solve(&self, cols: &[usize], penalty: f64) -> Result<DVector<f64>, SparseRegError> {
        let k = cols.len();
        let a = DMatrix::from_fn(k, k, |i, j| {
            self.gram[(cols[i], cols[j])] + if i == j { penalty } else { 0.0 }
        });
        let b = DVector::from_fn(k, |i, _| self.rhs[cols[i]]);
        let chol = Cholesky::new(a).ok_or(SparseRegError::RankDeficient)?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d.abs()), hi.max(d.abs())));
        if penalty == 0.0 && (lo == 0.0 || lo <= hi * 1e-8) {
            return Err(SparseRegError::RankDeficient);
        }
        Ok(chol.solve(&b))
    }
}

/// Sequential thresholding: starting from `warm_start`, repeatedly zero every
/// coefficient with `|lambda| < delta` and ridge re-solve the survivors.
pub fn stridge(
    udot: &DVector<f64>,
    phi: &DMatrix<f64>,
    delta: f64,
    cfg: &StridgeConfig,
    warm_start: &SparseCoeffs,
) -> Result<SparseCoeffs, SparseRegError> {
    let normal = Normal::new(phi, udot);
    stridge_with(&normal, delta, cfg, warm_start, &mut |_| {})
}

/// STRidge that reports the support after every iteration.
pub fn stridge_traced(
    udot: &DVector<f64>,
    phi: &DMatrix<f64>,
    delta: f64,
    cfg: &StridgeConfig,
    warm_start: &SparseCoeffs,
) -> Result<(SparseCoeffs, Vec<Vec<bool>>), SparseRegError> {
    let normal = Normal::new(phi, udot);
    let mut trace = Vec::new();
    let out = stridge_with(&normal, delta, cfg, warm_start, &mut |s| trace.push(s.to_vec()))?;
    Ok((out, trace))
}

fn stridge_with(
    normal: &Normal,
    delta: f64,
    cfg: &StridgeConfig,
    warm_start: &SparseCoeffs,
    observe: &mut dyn FnMut(&[bool]),
) -> Result<SparseCoeffs, SparseRegError> {
    let s = normal.rhs.len();
    if warm_start.len() != s {
        return Err(SparseRegError::Dimension(format!(
            "warm start has {} entries, library has {s}",
            warm_start.len()
        )));
    }
    let mut values = warm_start.values.clone();
    for _ in 0..cfg.max_iterations {
        let keep: Vec<usize> = (0..s).filter(|&j| values[j].abs() >= delta).collect();
        let mut support = vec![false; s];
        keep.iter().for_each(|&j| support[j] = true);
        observe(&support);
        if keep.is_empty() {
            return Ok(SparseCoeffs::zeros(s));
        }
        let sol = normal.solve(&keep, cfg.ridge_penalty)?;
        values = vec![0.0; s];
        for (i, &j) in keep.iter().enumerate() {
            values[j] = sol[i];
        }
    }
    let support = values.iter().map(|v| *v != 0.0).collect();
    Ok(SparseCoeffs { values, support })
}

/// `||phi_va lambda - udot_va||^2 + gamma * nnz(lambda)`.
pub fn l0_error_index(phi_va: &DMatrix<f64>, lambda: &SparseCoeffs, udot_va: &DVector<f64>, gamma: f64) -> f64 {
    let resid = phi_va * lambda.to_vector() - udot_va;
    resid.norm_squared() + gamma * lambda.nnz() as f64
}

/// Outcome of one [`threshold_search`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub coeffs: SparseCoeffs,
    /// Validation error index of `coeffs`.
    pub error: f64,
    /// Threshold used by each trial, in order.
    pub deltas: Vec<f64>,
    /// Whether each trial improved the validation error index.
    pub accepted: Vec<bool>,
}

/// Inputs shared by every trial of a threshold search.
#[derive(Debug, Clone, Copy)]
pub struct SearchProblem<'a> {
    pub udot_tr: &'a DVector<f64>,
    pub phi_tr: &'a DMatrix<f64>,
    pub udot_va: &'a DVector<f64>,
    pub phi_va: &'a DMatrix<f64>,
    pub gamma: f64,
}

/// Adaptive tolerance schedule around STRidge. Every trial restarts from
/// `warm_start`; the best coefficients by validation error index win, with
/// ties going to the later trial.
pub fn threshold_search(
    problem: SearchProblem<'_>,
    delta_increment: f64,
    n_str: usize,
    warm_start: &SparseCoeffs,
    cfg: &StridgeConfig,
) -> Result<SearchResult, SparseRegError> {
    assert!(delta_increment > 0.0, "threshold increment must be positive");
    let normal = Normal::new(problem.phi_tr, problem.udot_tr);
    let score = |c: &SparseCoeffs| l0_error_index(problem.phi_va, c, problem.udot_va, problem.gamma);

    let mut best = warm_start.clone();
    let mut best_err = score(warm_start);
    let mut step = delta_increment;
    let mut delta = step;
    let mut deltas = Vec::with_capacity(n_str);
    let mut accepted = Vec::with_capacity(n_str);
    for _ in 0..n_str {
        deltas.push(delta);
        let trial = stridge_with(&normal, delta, cfg, warm_start, &mut |_| {})?;
        let err = score(&trial);
        if err <= best_err {
            best = trial;
            best_err = err;
            delta += step;
            accepted.push(true);
        } else {
            step /= 1.618;
            delta = (delta - 2.0 * step).max(0.0) + step;
            accepted.push(false);
        }
    }
    Ok(SearchResult {
        coeffs: best,
        error: best_err,
        deltas,
        accepted,
    })
}

/// Independent threshold searches, one per column of `udot_tr`/`udot_va`.
pub fn threshold_search_components(
    udot_tr: &DMatrix<f64>,
    phi_tr: &DMatrix<f64>,
    udot_va: &DMatrix<f64>,
    phi_va: &DMatrix<f64>,
    gamma: f64,
    delta_increments: &[f64],
    n_str: usize,
    warm_starts: &[SparseCoeffs],
    cfg: &StridgeConfig,
) -> Result<Vec<SearchResult>, SparseRegError> {
    let n = udot_tr.ncols();
    if warm_starts.len() != n || delta_increments.len() != n || udot_va.ncols() != n {
        return Err(SparseRegError::Dimension(format!(
            "{n} components but {} warm starts / {} increments / {} validation columns",
            warm_starts.len(),
            delta_increments.len(),
            udot_va.ncols()
        )));
    }
    (0..n)
        .into_par_iter()
        .map(|c| {
            let tr = udot_tr.column(c).into_owned();
            let va = udot_va.column(c).into_owned();
            let problem = SearchProblem {
                udot_tr: &tr,
                phi_tr,
                udot_va: &va,
                phi_va,
                gamma,
            };
            threshold_search(problem, delta_increments[c], n_str, &warm_starts[c], cfg)
        })
        .collect()
}

/// Default threshold increment: 5% of the largest warm-start magnitude.
pub fn default_delta_increment(warm_start: &SparseCoeffs) -> f64 {
    let m = warm_start.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (0.05 * m).max(1e-8)
}

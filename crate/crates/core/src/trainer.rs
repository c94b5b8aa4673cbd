//! Joint training of the solution network and the sparse PDE coefficients.
//!
//! The pipeline is [`pretrain`] (dense coefficients with an ℓ1 penalty),
//! [`ado_run`] (alternating thresholded regression of the coefficients and
//! network retraining with the coefficients held fixed) and an optional
//! [`post_tune`] with the support frozen. All three mutate the network in
//! place and thread a [`TrainState`] through.

use crate::data::FieldDataset;
use crate::deriv::{evaluate, loss_param_gradient, DerivError, DerivRequest, PointObjective};
use crate::library::{
    assemble, condition_number, normalize_columns, rescale_coeffs, CompiledLibrary, FieldSource, LibraryError,
    LibraryMatrix, NetField,
};
use crate::network::{FieldNet, NetworkError};
use crate::optim::{lbfgs_minimize, AdamConfig, AdamState, LbfgsConfig, Objective, OptimError};
use crate::points::PointSet;
use crate::sparse_reg::{
    default_delta_increment, threshold_search_components, SparseCoeffs, SparseRegError, StridgeConfig,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged during {stage} at epoch {epoch}")]
    Diverged {
        stage: String,
        epoch: usize,
        /// State at the last finite loss; the network holds these parameters.
        state: Box<TrainState>,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Deriv(#[from] DerivError),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    SparseReg(#[from] SparseRegError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Epoch budget of one training stage: full-batch Adam steps followed by
/// L-BFGS iterations (one accepted line search per epoch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBudget {
    pub adam_epochs: usize,
    pub lbfgs_epochs: usize,
}

impl StageBudget {
    pub fn new(adam_epochs: usize, lbfgs_epochs: usize) -> Self {
        StageBudget {
            adam_epochs,
            lbfgs_epochs,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.adam_epochs == 0 && self.lbfgs_epochs == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdoConfig {
    /// Physics-loss weight.
    pub alpha: f64,
    /// Raise `alpha` to 10 when the physics loss after pre-training is below
    /// a tenth of the data loss.
    pub escalate_alpha: bool,
    /// ℓ1 weight; `None` means `1e-6` times the standard deviation of the
    /// measurements.
    pub beta: Option<f64>,
    /// Threshold increment; `None` derives one per component from the warm
    /// start of every regression.
    pub delta_increment: Option<f64>,
    pub n_max: usize,
    pub n_str: usize,
    /// Training share of the measurement and collocation splits.
    pub split_ratio: f64,
    pub pretrain: StageBudget,
    pub iteration: StageBudget,
    pub post_tune: StageBudget,
    pub adam: AdamConfig,
    pub lbfgs: LbfgsConfig,
    pub stridge: StridgeConfig,
    pub seed: u64,
}

impl Default for AdoConfig {
    fn default() -> Self {
        AdoConfig {
            alpha: 1.0,
            escalate_alpha: true,
            beta: None,
            delta_increment: None,
            n_max: 10,
            n_str: 10,
            split_ratio: 0.8,
            pretrain: StageBudget::new(2000, 1000),
            iteration: StageBudget::new(100, 500),
            post_tune: StageBudget::new(0, 500),
            adam: AdamConfig::default(),
            lbfgs: LbfgsConfig {
                f_tol: 1e-9,
                grad_tol: 1e-12,
                ..LbfgsConfig::default()
            },
            stridge: StridgeConfig::default(),
            seed: 0,
        }
    }
}

impl AdoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        // alpha = 0 is accepted: it turns every stage into plain data fitting
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if let Some(b) = self.beta {
            if !(b >= 0.0 && b.is_finite()) {
                return bad(format!("beta must be non-negative, got {b}"));
            }
        }
        if let Some(d) = self.delta_increment {
            if !(d > 0.0 && d.is_finite()) {
                return bad(format!("delta_increment must be positive, got {d}"));
            }
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio));
        }
        if !(self.adam.learning_rate > 0.0) {
            return bad("Adam learning rate must be positive".into());
        }
        Ok(())
    }
}

/// Measurements and collocation points of one branch (one dataset).
#[derive(Debug, Clone, PartialEq)]
pub struct BranchData {
    pub points: PointSet,
    /// Row-major `points x fields`.
    pub values: Vec<f64>,
    pub collocation: PointSet,
}

impl BranchData {
    pub fn new(data: &FieldDataset, collocation: PointSet) -> Self {
        BranchData {
            points: data.points.clone(),
            values: data.values.clone(),
            collocation,
        }
    }

    fn fields(&self) -> usize {
        self.values.len() / self.points.len().max(1)
    }
}

/// Seeded disjoint split of `0..n` into sorted `(train, valid)` index sets.
/// The training part gets `round(ratio * n)` indices, at least one, and the
/// validation part at least one whenever `n >= 2`.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_tr = if n < 2 {
        n
    } else {
        ((ratio * n as f64).round() as usize).clamp(1, n - 1)
    };
    let (mut tr, mut va) = (idx[..n_tr].to_vec(), idx[n_tr..].to_vec());
    tr.sort_unstable();
    va.sort_unstable();
    (tr, va)
}

/// A discovery problem: library plus the training and validation halves of
/// every branch.
#[derive(Debug, Clone)]
pub struct Problem {
    pub library: CompiledLibrary,
    pub train: Vec<BranchData>,
    pub valid: Vec<BranchData>,
}

impl Problem {
    /// Splits measurements and collocation points of every branch once.
    pub fn new(branches: Vec<BranchData>, library: CompiledLibrary, split_ratio: f64, seed: u64) -> Result<Self, TrainError> {
        if branches.is_empty() {
            return Err(TrainError::Config("no datasets".into()));
        }
        let n = library.output_dim();
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for (b, br) in branches.iter().enumerate() {
            if br.points.is_empty() || br.collocation.len() < 2 {
                return Err(TrainError::Config(format!(
                    "branch {b} needs measurements and at least two collocation points"
                )));
            }
            if br.fields() != n || br.values.len() != br.points.len() * n {
                return Err(TrainError::Config(format!(
                    "branch {b} has {} fields, library expects {n}",
                    br.fields()
                )));
            }
            let bseed = seed.wrapping_add(2 * b as u64);
            let (dtr, dva) = split_indices(br.points.len(), split_ratio, bseed);
            let (ctr, cva) = split_indices(br.collocation.len(), split_ratio, bseed + 1);
            let pick = |idx: &[usize]| -> Vec<f64> { idx.iter().flat_map(|&i| br.values[i * n..(i + 1) * n].to_vec()).collect() };
            train.push(BranchData {
                points: br.points.subset(&dtr),
                values: pick(&dtr),
                collocation: br.collocation.subset(&ctr),
            });
            valid.push(BranchData {
                points: br.points.subset(&dva),
                values: pick(&dva),
                collocation: br.collocation.subset(&cva),
            });
        }
        Ok(Problem { library, train, valid })
    }

    pub fn output_dim(&self) -> usize {
        self.library.output_dim()
    }

    /// Population standard deviation of every training and validation
    /// measurement stacked together.
    pub fn measurement_std(&self) -> f64 {
        let all: Vec<f64> = self
            .train
            .iter()
            .chain(&self.valid)
            .flat_map(|b| b.values.iter().copied())
            .collect();
        let m = all.len().max(1) as f64;
        let mean = all.iter().sum::<f64>() / m;
        (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m).sqrt()
    }

    fn check_net<N: FieldNet + ?Sized>(&self, net: &N) -> Result<(), TrainError> {
        if net.branch_count() != self.train.len() {
            return Err(TrainError::Config(format!(
                "network has {} branches for {} datasets",
                net.branch_count(),
                self.train.len()
            )));
        }
        if net.output_dim() != self.output_dim() || net.input_dim() != self.library.spec().input_dim {
            return Err(TrainError::Config("network and library dimensions differ".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub data: f64,
    pub physics: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    /// Stage label of each epoch.
    pub stage: Vec<String>,
    pub data: Vec<f64>,
    pub physics: Vec<f64>,
    pub total: Vec<f64>,
}

impl LossTrace {
    fn push(&mut self, stage: &str, p: LossParts) {
        self.stage.push(stage.to_string());
        self.data.push(p.data);
        self.physics.push(p.physics);
        self.total.push(p.total);
    }

    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffSnapshot {
    pub stage: String,
    /// `terms x components`.
    pub matrix: Vec<Vec<f64>>,
}

/// Coefficient matrices in the order the stages ran.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoeffHistory {
    pub symbols: Vec<String>,
    pub snapshots: Vec<CoeffSnapshot>,
}

impl CoeffHistory {
    fn record(&mut self, stage: &str, coeffs: &[SparseCoeffs]) {
        let s = self.symbols.len();
        let matrix = (0..s).map(|j| coeffs.iter().map(|c| c.values[j]).collect()).collect();
        self.snapshots.push(CoeffSnapshot {
            stage: stage.to_string(),
            matrix,
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Vec<f64>,
    /// Coefficients per output component, physical units.
    pub coeffs: Vec<SparseCoeffs>,
    pub alpha: f64,
    pub beta: f64,
    pub trace: LossTrace,
    /// Validation losses at the end of every stage.
    pub validation: Vec<(String, LossParts)>,
    pub history: CoeffHistory,
    pub ado_iterations: usize,
    pub warnings: Vec<String>,
}

impl TrainState {
    pub fn is_empty_model(&self) -> bool {
        self.coeffs.iter().all(SparseCoeffs::is_zero)
    }

    pub fn support(&self) -> Vec<Vec<bool>> {
        self.coeffs.iter().map(|c| c.support.clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// Losses

struct DataTerm<'a> {
    requests: Vec<DerivRequest>,
    targets: &'a [f64],
    weight: f64,
}

impl PointObjective for DataTerm<'_> {
    fn requests(&self) -> &[DerivRequest] {
        &self.requests
    }

    fn eval(&self, point: usize, _: &[f64], values: &[f64], grad: &mut [f64], _: &mut [f64]) -> f64 {
        let n = values.len();
        let mut loss = 0.0;
        for c in 0..n {
            let r = values[c] - self.targets[point * n + c];
            loss += self.weight * r * r;
            grad[c] = 2.0 * self.weight * r;
        }
        loss
    }
}

/// Squared residual `|u_t - phi Lambda|^2` per collocation point.
/// `lambda` is `terms x components`, row-major.
struct PhysicsTerm<'a> {
    library: &'a CompiledLibrary,
    lambda: &'a [f64],
    weight: f64,
    with_coeff_gradient: bool,
}

impl PointObjective for PhysicsTerm<'_> {
    fn requests(&self) -> &[DerivRequest] {
        self.library.requests()
    }

    fn aux_len(&self) -> usize {
        if self.with_coeff_gradient {
            self.lambda.len()
        } else {
            0
        }
    }

    fn eval(&self, _: usize, coords: &[f64], values: &[f64], grad: &mut [f64], aux: &mut [f64]) -> f64 {
        let lib = self.library;
        let (n, s) = (lib.output_dim(), lib.len());
        let phi: Vec<f64> = (0..s).map(|j| lib.term_value(j, values, coords)).collect();
        let mut loss = 0.0;
        for c in 0..n {
            let r = values[c] - (0..s).map(|j| self.lambda[j * n + c] * phi[j]).sum::<f64>();
            loss += self.weight * r * r;
            let w = 2.0 * self.weight * r;
            grad[c] += w;
            for j in 0..s {
                let coef = self.lambda[j * n + c];
                if coef != 0.0 {
                    lib.term_gradient(j, values, coords, -w * coef, grad);
                }
                if self.with_coeff_gradient {
                    aux[j * n + c] -= w * phi[j];
                }
            }
        }
        loss
    }
}

fn total_points(branches: &[BranchData], f: impl Fn(&BranchData) -> usize) -> usize {
    branches.iter().map(f).sum()
}

/// Mean squared misfit `(1/N_m) sum |u(x) - u_m|^2` over every branch.
pub fn loss_data<N: FieldNet + ?Sized>(net: &N, branches: &[BranchData]) -> Result<f64, TrainError> {
    let nm = total_points(branches, |b| b.points.len());
    if nm == 0 {
        return Err(TrainError::Config("no measurements".into()));
    }
    let n = net.output_dim();
    let req: Vec<DerivRequest> = (0..n).map(|c| DerivRequest::value(net.input_dim(), c)).collect();
    let mut sum = 0.0;
    for (b, br) in branches.iter().enumerate() {
        let pred = evaluate(net, Some(b), &br.points, &req)?;
        sum += pred.iter().zip(&br.values).map(|(p, m)| (p - m) * (p - m)).sum::<f64>();
    }
    Ok(sum / nm as f64)
}

/// Mean squared PDE residual `(1/N_c) |U_t - Phi Lambda|^2` over the stacked
/// collocation rows of every branch.
pub fn loss_physics<N: FieldNet + ?Sized>(
    net: &N,
    coeffs: &[SparseCoeffs],
    branches: &[BranchData],
    library: &CompiledLibrary,
) -> Result<f64, TrainError> {
    let fields: Vec<NetField<'_, N>> = (0..branches.len()).map(|b| NetField::new(net, Some(b))).collect();
    physics_residual(&fields, coeffs, branches, library)
}

/// [`loss_physics`] for any field source, e.g. an analytic solution.
pub fn physics_residual<F: FieldSource>(
    fields: &[F],
    coeffs: &[SparseCoeffs],
    branches: &[BranchData],
    library: &CompiledLibrary,
) -> Result<f64, TrainError> {
    if coeffs.len() != library.output_dim() || coeffs.iter().any(|c| c.len() != library.len()) {
        return Err(TrainError::Config("coefficient shape does not match the library".into()));
    }
    let blocks: Vec<(&dyn FieldSource, &PointSet)> = fields
        .iter()
        .zip(branches)
        .map(|(f, b)| (f as &dyn FieldSource, &b.collocation))
        .collect();
    let m = assemble(&blocks, library)?;
    let mut sum = 0.0;
    for (c, lam) in coeffs.iter().enumerate() {
        let r = m.udot.column(c) - &m.phi * lam.to_vector();
        sum += r.norm_squared();
    }
    Ok(sum / m.rows() as f64)
}

/// Value and parameter gradient of [`loss_data`].
pub fn data_loss_gradient<N: FieldNet + ?Sized>(net: &N, branches: &[BranchData]) -> Result<(f64, Vec<f64>), TrainError> {
    let nm = total_points(branches, |b| b.points.len());
    if nm == 0 {
        return Err(TrainError::Config("no measurements".into()));
    }
    let n = net.output_dim();
    let mut value = 0.0;
    let mut grad = vec![0.0; net.param_count()];
    for (b, br) in branches.iter().enumerate() {
        let term = DataTerm {
            requests: (0..n).map(|c| DerivRequest::value(net.input_dim(), c)).collect(),
            targets: &br.values,
            weight: 1.0 / nm as f64,
        };
        let lg = loss_param_gradient(net, Some(b), &br.points, &term)?;
        value += lg.value;
        grad.iter_mut().zip(&lg.gradient.values).for_each(|(g, v)| *g += v);
    }
    Ok((value, grad))
}

fn physics_pass<N: FieldNet + ?Sized>(
    net: &N,
    lambda: &[f64],
    branches: &[BranchData],
    library: &CompiledLibrary,
    with_coeff_gradient: bool,
) -> Result<(f64, Vec<f64>, Vec<f64>), TrainError> {
    let nc = total_points(branches, |b| b.collocation.len());
    if nc == 0 {
        return Err(TrainError::Config("no collocation points".into()));
    }
    let term = PhysicsTerm {
        library,
        lambda,
        weight: 1.0 / nc as f64,
        with_coeff_gradient,
    };
    let mut value = 0.0;
    let mut g_theta = vec![0.0; net.param_count()];
    let mut g_lambda = vec![0.0; if with_coeff_gradient { lambda.len() } else { 0 }];
    for (b, br) in branches.iter().enumerate() {
        let lg = loss_param_gradient(net, Some(b), &br.collocation, &term)?;
        value += lg.value;
        g_theta.iter_mut().zip(&lg.gradient.values).for_each(|(g, v)| *g += v);
        g_lambda.iter_mut().zip(&lg.aux).for_each(|(g, v)| *g += v);
    }
    Ok((value, g_theta, g_lambda))
}

/// Gradient of [`loss_physics`] with respect to network parameters and
/// coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsGradient {
    pub value: f64,
    pub params: Vec<f64>,
    /// One vector per output component, in library term order.
    pub coeffs: Vec<Vec<f64>>,
}

pub fn physics_loss_gradient<N: FieldNet + ?Sized>(
    net: &N,
    coeffs: &[SparseCoeffs],
    branches: &[BranchData],
    library: &CompiledLibrary,
) -> Result<PhysicsGradient, TrainError> {
    if coeffs.len() != library.output_dim() || coeffs.iter().any(|c| c.len() != library.len()) {
        return Err(TrainError::Config("coefficient shape does not match the library".into()));
    }
    let n = coeffs.len();
    let (value, params, g) = physics_pass(net, &lambda_matrix(coeffs), branches, library, true)?;
    let coeffs = (0..n).map(|c| (0..library.len()).map(|j| g[j * n + c]).collect()).collect();
    Ok(PhysicsGradient { value, params, coeffs })
}

// ---------------------------------------------------------------------------
// Optimization over network parameters and a subset of the coefficients

struct Joint<'a, N: FieldNet + Clone> {
    net: N,
    branches: &'a [BranchData],
    library: &'a CompiledLibrary,
    /// Full `terms x components` coefficient matrix of `library`.
    lambda: Vec<f64>,
    /// Entries of `lambda` that are optimized (appended after the network
    /// parameters).
    free: Vec<usize>,
    alpha: f64,
    beta: f64,
    n_theta: usize,
    recent: Vec<LossParts>,
    accepted: Vec<LossParts>,
}

impl<N: FieldNet + Clone> Joint<'_, N> {
    fn unpack(&mut self, x: &[f64]) -> Result<(), TrainError> {
        self.net.set_params(&x[..self.n_theta])?;
        for (k, &i) in self.free.iter().enumerate() {
            self.lambda[i] = x[self.n_theta + k];
        }
        Ok(())
    }

    fn pack(&self) -> Vec<f64> {
        let mut x = self.net.params();
        x.extend(self.free.iter().map(|&i| self.lambda[i]));
        x
    }

    fn evaluate(&mut self, x: &[f64]) -> Result<(LossParts, Vec<f64>), TrainError> {
        self.unpack(x)?;
        let (data, mut grad) = data_loss_gradient(&self.net, self.branches)?;
        grad.resize(x.len(), 0.0);
        let mut physics = 0.0;
        if self.alpha != 0.0 {
            let (value, g_theta, g_lambda) =
                physics_pass(&self.net, &self.lambda, self.branches, self.library, !self.free.is_empty())?;
            physics = value;
            for (g, v) in grad.iter_mut().zip(&g_theta) {
                *g += self.alpha * v;
            }
            for (k, &i) in self.free.iter().enumerate() {
                grad[self.n_theta + k] += self.alpha * g_lambda[i];
            }
        }
        let mut l1 = 0.0;
        if self.beta != 0.0 {
            for (k, &i) in self.free.iter().enumerate() {
                let v = self.lambda[i];
                l1 += v.abs();
                // subgradient 0 at 0
                if v != 0.0 {
                    grad[self.n_theta + k] += self.beta * v.signum();
                }
            }
        }
        let total = data + self.alpha * physics + self.beta * l1;
        Ok((LossParts { data, physics, total }, grad))
    }
}

impl<N: FieldNet + Clone> Objective for Joint<'_, N> {
    fn eval(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        match self.evaluate(x) {
            Ok((parts, grad)) if parts.total.is_finite() => {
                self.recent.push(parts);
                (parts.total, grad)
            }
            _ => (f64::NAN, vec![0.0; x.len()]),
        }
    }

    fn accepted(&mut self, _x: &[f64], value: f64) {
        if let Some(p) = self.recent.iter().rev().find(|p| p.total.to_bits() == value.to_bits()) {
            self.accepted.push(*p);
        }
        self.recent.clear();
    }
}

struct StageOutcome {
    lambda: Vec<f64>,
    trace: Vec<LossParts>,
    diverged_at: Option<usize>,
}

/// Adam then L-BFGS over the network parameters and `free` coefficient
/// entries. Leaves the network at the last finite iterate.
#[allow(clippy::too_many_arguments)]
fn train_stage<N: FieldNet + Clone>(
    net: &mut N,
    branches: &[BranchData],
    library: &CompiledLibrary,
    lambda: Vec<f64>,
    free: Vec<usize>,
    alpha: f64,
    beta: f64,
    budget: StageBudget,
    cfg: &AdoConfig,
) -> Result<StageOutcome, TrainError> {
    let mut joint = Joint {
        net: net.clone(),
        branches,
        library,
        lambda,
        free,
        alpha,
        beta,
        n_theta: net.param_count(),
        recent: Vec::new(),
        accepted: Vec::new(),
    };
    let mut x = joint.pack();
    let mut trace = Vec::new();
    let mut adam = AdamState::new(x.len(), cfg.adam);
    let mut diverged_at = None;
    for epoch in 0..budget.adam_epochs {
        let (parts, grad) = match joint.evaluate(&x) {
            Ok(v) => v,
            Err(TrainError::Deriv(DerivError::NonFiniteLoss { .. })) => {
                diverged_at = Some(epoch);
                break;
            }
            Err(e) => return Err(e),
        };
        if !parts.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            diverged_at = Some(epoch);
            break;
        }
        trace.push(parts);
        let before = x.clone();
        adam.step(&mut x, &grad)?;
        if x.iter().any(|v| !v.is_finite()) {
            x = before;
            diverged_at = Some(epoch);
            break;
        }
    }
    if diverged_at.is_none() && budget.lbfgs_epochs > 0 {
        let lcfg = LbfgsConfig {
            max_iterations: budget.lbfgs_epochs,
            ..cfg.lbfgs
        };
        match lbfgs_minimize(&mut joint, &mut x, &lcfg) {
            Ok(_) => trace.append(&mut joint.accepted),
            Err(OptimError::NonFiniteStart) | Err(OptimError::NonFiniteGradient { .. }) => {
                diverged_at = Some(budget.adam_epochs)
            }
            Err(e) => return Err(e.into()),
        }
    }
    joint.unpack(&x)?;
    net.set_params(&x[..joint.n_theta])?;
    Ok(StageOutcome {
        lambda: joint.lambda,
        trace,
        diverged_at,
    })
}

fn lambda_matrix(coeffs: &[SparseCoeffs]) -> Vec<f64> {
    let n = coeffs.len();
    let s = coeffs.first().map_or(0, SparseCoeffs::len);
    let mut m = vec![0.0; s * n];
    for (c, lam) in coeffs.iter().enumerate() {
        for j in 0..s {
            m[j * n + c] = lam.values[j];
        }
    }
    m
}

fn coeffs_from_matrix(m: &[f64], n: usize, support: Option<&[Vec<bool>]>) -> Vec<SparseCoeffs> {
    let s = m.len() / n.max(1);
    (0..n)
        .map(|c| {
            let values: Vec<f64> = (0..s).map(|j| m[j * n + c]).collect();
            match support {
                Some(sup) => SparseCoeffs::masked(values, sup[c].clone()),
                None => SparseCoeffs {
                    support: values.iter().map(|v| *v != 0.0).collect(),
                    values,
                },
            }
        })
        .collect()
}

fn validation_losses<N: FieldNet + Clone>(
    net: &N,
    problem: &Problem,
    coeffs: &[SparseCoeffs],
    alpha: f64,
) -> Result<LossParts, TrainError> {
    let data = loss_data(net, &problem.valid)?;
    let physics = loss_physics(net, coeffs, &problem.valid, &problem.library)?;
    Ok(LossParts {
        data,
        physics,
        total: data + alpha * physics,
    })
}

fn finish_stage<N: FieldNet + Clone>(
    net: &N,
    problem: &Problem,
    state: &mut TrainState,
    label: &str,
    outcome: &StageOutcome,
) -> Result<(), TrainError> {
    for p in &outcome.trace {
        state.trace.push(label, *p);
    }
    state.params = net.params();
    if let Some(epoch) = outcome.diverged_at {
        return Err(TrainError::Diverged {
            stage: label.to_string(),
            epoch,
            state: Box::new(state.clone()),
        });
    }
    let v = validation_losses(net, problem, &state.coeffs, state.alpha)?;
    state.validation.push((label.to_string(), v));
    Ok(())
}

/// Jointly fits the network and dense coefficients to
/// `L_d + alpha L_p + beta |Lambda|_1`, starting from zero coefficients.
pub fn pretrain<N: FieldNet + Clone>(net: &mut N, problem: &Problem, cfg: &AdoConfig) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    problem.check_net(net)?;
    let lib = &problem.library;
    let (s, n) = (lib.len(), lib.output_dim());
    let beta = cfg.beta.unwrap_or_else(|| 1e-6 * problem.measurement_std());
    let mut state = TrainState {
        params: net.params(),
        coeffs: vec![SparseCoeffs::from_values(vec![0.0; s]); n],
        alpha: cfg.alpha,
        beta,
        trace: LossTrace::default(),
        validation: Vec::new(),
        history: CoeffHistory {
            symbols: lib.spec().symbols(),
            snapshots: Vec::new(),
        },
        ado_iterations: 0,
        warnings: Vec::new(),
    };
    let free: Vec<usize> = if cfg.alpha == 0.0 && beta == 0.0 {
        Vec::new()
    } else {
        (0..s * n).collect()
    };
    let outcome = train_stage(
        net,
        &problem.train,
        lib,
        lambda_matrix(&state.coeffs),
        free,
        cfg.alpha,
        beta,
        cfg.pretrain,
        cfg,
    )?;
    state.coeffs = coeffs_from_matrix(&outcome.lambda, n, None);
    finish_stage(net, problem, &mut state, "pretrain", &outcome)?;
    state.history.record("pretrain", &state.coeffs);

    if cfg.escalate_alpha && cfg.alpha == 1.0 {
        let ld = loss_data(net, &problem.train)?;
        let lp = loss_physics(net, &state.coeffs, &problem.train, lib)?;
        if lp < 0.1 * ld {
            state.alpha = 10.0;
        }
    }
    Ok(state)
}

/// One sparse-regression update of the coefficients from the current network:
/// assemble and normalize libraries, run the threshold search per component
/// and rescale to physical units.
pub fn sparse_update<N: FieldNet + Clone>(
    net: &N,
    problem: &Problem,
    warm: &[SparseCoeffs],
    cfg: &AdoConfig,
) -> Result<Vec<SparseCoeffs>, TrainError> {
    let lib = &problem.library;
    let assemble_all = |branches: &[BranchData]| -> Result<LibraryMatrix, TrainError> {
        let fields: Vec<NetField<'_, N>> = (0..branches.len()).map(|b| NetField::new(net, Some(b))).collect();
        let blocks: Vec<(&dyn FieldSource, &PointSet)> = fields
            .iter()
            .zip(branches)
            .map(|(f, b)| (f as &dyn FieldSource, &b.collocation))
            .collect();
        Ok(assemble(&blocks, lib)?)
    };
    let tr = assemble_all(&problem.train)?;
    let va = assemble_all(&problem.valid)?;
    let tr_n = normalize_columns(&tr)?;
    let scales = tr_n.column_scales.clone();
    let va_n = va.normalize_with(&scales);

    let mut full = tr.clone();
    full.phi = nalgebra::DMatrix::from_fn(tr.rows() + va.rows(), lib.len(), |i, j| {
        if i < tr.rows() {
            tr.phi[(i, j)]
        } else {
            va.phi[(i - tr.rows(), j)]
        }
    });
    full.udot = nalgebra::DMatrix::zeros(full.phi.nrows(), lib.output_dim());
    let gamma = 1e-3 * condition_number(&normalize_columns(&full)?.phi);
    if !gamma.is_finite() {
        return Err(TrainError::SparseReg(SparseRegError::RankDeficient));
    }

    let warm_n: Vec<SparseCoeffs> = warm
        .iter()
        .map(|w| SparseCoeffs {
            values: w.values.iter().zip(&scales).map(|(v, s)| v * s).collect(),
            support: w.support.clone(),
        })
        .collect();
    let deltas: Vec<f64> = warm_n
        .iter()
        .map(|w| cfg.delta_increment.unwrap_or_else(|| default_delta_increment(w)))
        .collect();
    let results = threshold_search_components(
        &tr_n.udot,
        &tr_n.phi,
        &va_n.udot,
        &va_n.phi,
        gamma,
        &deltas,
        cfg.n_str,
        &warm_n,
        &cfg.stridge,
    )?;
    Ok(results.iter().map(|r| rescale_coeffs(&r.coeffs, &scales)).collect())
}

/// Network retraining with the coefficients fixed. Only active terms are
/// evaluated.
fn retrain_fixed<N: FieldNet + Clone>(
    net: &mut N,
    problem: &Problem,
    coeffs: &[SparseCoeffs],
    alpha: f64,
    budget: StageBudget,
    cfg: &AdoConfig,
    free_active: bool,
) -> Result<(StageOutcome, Vec<usize>), TrainError> {
    let n = problem.output_dim();
    let active: Vec<usize> = (0..problem.library.len())
        .filter(|&j| coeffs.iter().any(|c| c.support[j]))
        .collect();
    let lib = problem.library.restricted(&active)?;
    let mut lambda = vec![0.0; active.len() * n];
    let mut free = Vec::new();
    for (k, &j) in active.iter().enumerate() {
        for (c, lam) in coeffs.iter().enumerate() {
            lambda[k * n + c] = lam.values[j];
            if free_active && lam.support[j] {
                free.push(k * n + c);
            }
        }
    }
    let outcome = train_stage(net, &problem.train, &lib, lambda, free, alpha, 0.0, budget, cfg)?;
    Ok((outcome, active))
}

/// Alternates sparse regression of the coefficients with network retraining
/// for `n_max` iterations, starting from a pre-trained state.
pub fn ado_run<N: FieldNet + Clone>(
    net: &mut N,
    problem: &Problem,
    cfg: &AdoConfig,
    mut state: TrainState,
) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    problem.check_net(net)?;
    for k in 1..=cfg.n_max {
        let label = format!("ado {k}");
        state.coeffs = sparse_update(net, problem, &state.coeffs, cfg)?;
        let (outcome, _) = retrain_fixed(net, problem, &state.coeffs, state.alpha, cfg.iteration, cfg, false)?;
        state.ado_iterations = k;
        finish_stage(net, problem, &mut state, &label, &outcome)?;
        state.history.record(&label, &state.coeffs);
    }
    if state.is_empty_model() {
        state
            .warnings
            .push("every coefficient was thresholded to zero: no PDE identified".into());
    }
    Ok(state)
}

/// Refines the network and the nonzero coefficients with the support frozen.
pub fn post_tune<N: FieldNet + Clone>(
    net: &mut N,
    problem: &Problem,
    cfg: &AdoConfig,
    mut state: TrainState,
) -> Result<TrainState, TrainError> {
    if cfg.post_tune.is_empty() {
        return Ok(state);
    }
    cfg.validate()?;
    problem.check_net(net)?;
    if state.is_empty_model() {
        return Err(TrainError::Config("post-tuning needs a nonempty support".into()));
    }
    let n = problem.output_dim();
    let (outcome, active) = retrain_fixed(net, problem, &state.coeffs, state.alpha, cfg.post_tune, cfg, true)?;
    for (k, &j) in active.iter().enumerate() {
        for (c, lam) in state.coeffs.iter_mut().enumerate() {
            if lam.support[j] {
                lam.values[j] = outcome.lambda[k * n + c];
            }
        }
    }
    finish_stage(net, problem, &mut state, "post-tune", &outcome)?;
    state.history.record("post-tune", &state.coeffs);
    Ok(state)
}

/// Pre-training, the alternating loop and (when budgeted) post-tuning.
pub fn discover<N: FieldNet + Clone>(net: &mut N, problem: &Problem, cfg: &AdoConfig) -> Result<TrainState, TrainError> {
    let state = pretrain(net, problem, cfg)?;
    let state = ado_run(net, problem, cfg, state)?;
    if state.is_empty_model() {
        return Ok(state);
    }
    post_tune(net, problem, cfg, state)
}

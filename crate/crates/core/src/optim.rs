//! Adam and L-BFGS over flat parameter vectors.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },
    #[error("non-finite objective at the starting point")]
    NonFiniteStart,
    #[error("length mismatch: {params} parameters, {grad} gradient entries")]
    Length { params: usize, grad: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Halve the learning rate after every this many steps.
    pub halve_every: Option<usize>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            halve_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Learning rate applied by the next step.
    pub fn learning_rate(&self) -> f64 {
        match self.config.halve_every {
            Some(k) if k > 0 => self.config.learning_rate * 0.5f64.powi((self.step / k as u64) as i32),
            _ => self.config.learning_rate,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), OptimError> {
        if params.len() != grad.len() || self.m.len() != grad.len() {
            return Err(OptimError::Length {
                params: params.len(),
                grad: grad.len(),
            });
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient { index });
        }
        let lr = self.learning_rate();
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + epsilon);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    /// Stop when the largest gradient entry falls below this.
    pub grad_tol: f64,
    /// Stop when an accepted step changes the objective by less than
    /// `f_tol * |f|`. Purely relative, so tiny losses are not cut short.
    pub f_tol: f64,
    pub max_iterations: usize,
    /// Objective evaluations allowed per line search.
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 20,
            c1: 1e-4,
            c2: 0.9,
            grad_tol: 1e-8,
            f_tol: 1e-14,
            max_iterations: 1000,
            max_line_search: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsReport {
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Objective after each accepted step (first entry: the start).
    pub values: Vec<f64>,
    /// Curvature pairs rejected for `s^T y <= 0`.
    pub skipped_pairs: usize,
}

/// Objective returning value and gradient; a non-finite value marks the
/// point as infeasible.
pub trait Objective {
    fn eval(&mut self, x: &[f64]) -> (f64, Vec<f64>);

    /// Called once per accepted L-BFGS iterate with its objective value.
    fn accepted(&mut self, _x: &[f64], _value: f64) {}
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Objective for F {
    fn eval(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self(x)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

struct Point {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    dg: f64,
}

struct LineSearch<'a, O: Objective> {
    obj: &'a mut O,
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    dg0: f64,
    c1: f64,
    c2: f64,
    budget: usize,
    evals: usize,
}

impl<O: Objective> LineSearch<'_, O> {
    fn probe(&mut self, alpha: f64) -> Option<Point> {
        self.evals += 1;
        let xt: Vec<f64> = self.x.iter().zip(self.d).map(|(x, d)| x + alpha * d).collect();
        let (f, g) = self.obj.eval(&xt);
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let dg = dot(&g, self.d);
        Some(Point { alpha, f, g, dg })
    }

    fn armijo(&self, p: &Point) -> bool {
        sufficient_decrease(self.f0, self.dg0, p, self.c1)
    }

    fn curvature(&self, p: &Point) -> bool {
        p.dg.abs() <= -self.c2 * self.dg0
    }

    /// Strong-Wolfe search: bracketing phase with step doubling, then zoom.
    fn run(&mut self, alpha0: f64) -> Option<Point> {
        let mut prev = Point {
            alpha: 0.0,
            f: self.f0,
            g: Vec::new(),
            dg: self.dg0,
        };
        let mut alpha = alpha0;
        let mut first = true;
        while self.evals < self.budget {
            let Some(p) = self.probe(alpha) else {
                // infeasible: pull back towards the last good step
                alpha = prev.alpha + 0.5 * (alpha - prev.alpha);
                continue;
            };
            if !self.armijo(&p) || (!first && p.f >= prev.f) {
                return self.zoom(prev, p);
            }
            if self.curvature(&p) {
                return Some(p);
            }
            if p.dg >= 0.0 {
                return self.zoom(p, prev);
            }
            alpha = p.alpha * 2.0;
            prev = p;
            first = false;
        }
        None
    }

    fn zoom(&mut self, mut lo: Point, mut hi: Point) -> Option<Point> {
        while self.evals < self.budget {
            let alpha = cubic_step(&lo, &hi);
            let Some(p) = self.probe(alpha) else {
                hi = Point {
                    alpha,
                    f: f64::INFINITY,
                    g: Vec::new(),
                    dg: f64::NAN,
                };
                continue;
            };
            if !self.armijo(&p) || p.f >= lo.f {
                hi = p;
            } else {
                if self.curvature(&p) {
                    return Some(p);
                }
                if p.dg * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
            if (hi.alpha - lo.alpha).abs() <= 1e-16 * lo.alpha.abs().max(1e-300) {
                break;
            }
        }
        None
    }
}

/// Armijo condition, or — once the decrease is below the rounding level of
/// `f0` — its slope-based approximate form `phi'(a) <= (2 c1 - 1) phi'(0)` with
/// no increase in value.
fn sufficient_decrease(f0: f64, dg0: f64, p: &Point, c1: f64) -> bool {
    if p.f <= f0 + c1 * p.alpha * dg0 {
        return true;
    }
    let rounding = 1e3 * f64::EPSILON * f0.abs();
    p.f <= f0 && f0 - p.f <= rounding && p.dg <= (2.0 * c1 - 1.0) * dg0
}

/// Minimizer of the cubic through two bracketing points, safeguarded to the
/// interior of the bracket; bisection when the data do not allow a cubic.
fn cubic_step(a: &Point, b: &Point) -> f64 {
    let (lo, hi) = if a.alpha < b.alpha { (a.alpha, b.alpha) } else { (b.alpha, a.alpha) };
    let mid = 0.5 * (a.alpha + b.alpha);
    if !b.f.is_finite() || !b.dg.is_finite() {
        return mid;
    }
    let d1 = a.dg + b.dg - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.dg * b.dg;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.dg + d2 - d1) / (b.dg - a.dg + 2.0 * d2);
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t > lo + margin && t < hi - margin {
        t
    } else {
        mid
    }
}

/// Limited-memory BFGS with a strong-Wolfe line search. `x` is updated in
/// place to the last accepted iterate.
pub fn lbfgs_minimize<O: Objective>(obj: &mut O, x: &mut Vec<f64>, cfg: &LbfgsConfig) -> Result<LbfgsReport, OptimError> {
    let (mut f, mut g) = obj.eval(x);
    if !f.is_finite() {
        return Err(OptimError::NonFiniteStart);
    }
    if let Some(index) = g.iter().position(|v| !v.is_finite()) {
        return Err(OptimError::NonFiniteGradient { index });
    }
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut report = LbfgsReport {
        value: f,
        iterations: 0,
        evaluations: 1,
        termination: Termination::MaxIterations,
        values: vec![f],
        skipped_pairs: 0,
    };
    if inf_norm(&g) < cfg.grad_tol {
        report.termination = Termination::GradientTolerance;
        return Ok(report);
    }
    while report.iterations < cfg.max_iterations {
        let mut d = two_loop(&g, &pairs);
        let mut dg0 = dot(&g, &d);
        if !(dg0 < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            dg0 = dot(&g, &d);
        }
        let alpha0 = if pairs.is_empty() {
            (1.0 / dot(&g, &g).sqrt()).min(1.0)
        } else {
            1.0
        };
        let mut ls = LineSearch {
            obj,
            x,
            d: &d,
            f0: f,
            dg0,
            c1: cfg.c1,
            c2: cfg.c2,
            budget: cfg.max_line_search,
            evals: 0,
        };
        let accepted = ls.run(alpha0);
        report.evaluations += ls.evals;
        let Some(p) = accepted else {
            report.termination = Termination::LineSearchFailure;
            break;
        };
        assert!(
            sufficient_decrease(f, dg0, &p, cfg.c1) && p.dg.abs() <= -cfg.c2 * dg0,
            "accepted step violates the strong Wolfe conditions"
        );
        let s: Vec<f64> = d.iter().map(|v| p.alpha * v).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 0.0 {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s.clone(), y, 1.0 / sy));
        } else {
            report.skipped_pairs += 1;
        }
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        let change = f - p.f;
        f = p.f;
        g = p.g;
        report.iterations += 1;
        obj.accepted(x, f);
        report.values.push(f);
        report.value = f;
        if inf_norm(&g) < cfg.grad_tol {
            report.termination = Termination::GradientTolerance;
            break;
        }
        if change.abs() <= cfg.f_tol * f.abs() {
            report.termination = Termination::FunctionTolerance;
            break;
        }
    }
    Ok(report)
}

/// `-H g` by the two-loop recursion with `H0 = (s^T y / y^T y) I`.
fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

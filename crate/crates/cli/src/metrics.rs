//! Scoring of a discovered model against reference equations.

use pdediscover::data::FieldDataset;
use pdediscover::deriv::{evaluate, DerivRequest};
use pdediscover::network::FieldNet;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One equation `lhs = sum coefficient * term`, terms in library order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equation {
    pub lhs: String,
    pub terms: Vec<(String, f64)>,
}

impl Equation {
    pub fn coefficient(&self, term: &str) -> Option<f64> {
        self.terms.iter().find(|(t, _)| t == term).map(|(_, v)| *v)
    }

    fn support(&self) -> Vec<&str> {
        let mut s: Vec<&str> = self.terms.iter().filter(|(_, v)| *v != 0.0).map(|(t, _)| t.as_str()).collect();
        s.sort_unstable();
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermError {
    pub equation: String,
    pub term: String,
    pub truth: f64,
    pub found: f64,
    pub relative_error_percent: f64,
}

/// Coefficient error statistics. `mean_percent` is `None` exactly when the
/// supports differ, with `reason` saying why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMetrics {
    pub support_exact_match: bool,
    pub mean_percent: Option<f64>,
    /// Sample standard deviation over terms; `None` below two terms.
    pub std_percent: Option<f64>,
    pub reason: Option<String>,
    pub terms: Vec<TermError>,
}

/// Relative coefficient errors over the true support, averaged with their
/// sample standard deviation. A support mismatch makes the error not
/// applicable.
pub fn compute_metrics(found: &[Equation], truth: &[Equation]) -> CoefficientMetrics {
    let mut mismatch = Vec::new();
    for t in truth {
        match found.iter().find(|f| f.lhs == t.lhs) {
            Some(f) if f.support() == t.support() => {}
            Some(f) => mismatch.push(format!("{}: found {{{}}}, expected {{{}}}", t.lhs, f.support().join(", "), t.support().join(", "))),
            None => mismatch.push(format!("{}: no such equation in the result", t.lhs)),
        }
    }
    for f in found {
        if !truth.iter().any(|t| t.lhs == f.lhs) && !f.support().is_empty() {
            mismatch.push(format!("{}: no reference equation", f.lhs));
        }
    }
    if !mismatch.is_empty() {
        return CoefficientMetrics {
            support_exact_match: false,
            mean_percent: None,
            std_percent: None,
            reason: Some(format!("support mismatch ({})", mismatch.join("; "))),
            terms: Vec::new(),
        };
    }

    let mut terms = Vec::new();
    for t in truth {
        let f = found.iter().find(|f| f.lhs == t.lhs).expect("checked above");
        for (name, v) in t.terms.iter().filter(|(_, v)| *v != 0.0) {
            let got = f.coefficient(name).unwrap_or(0.0);
            terms.push(TermError {
                equation: t.lhs.clone(),
                term: name.clone(),
                truth: *v,
                found: got,
                relative_error_percent: 100.0 * (got - v).abs() / v.abs(),
            });
        }
    }
    let errs: Vec<f64> = terms.iter().map(|t| t.relative_error_percent).collect();
    let n = errs.len() as f64;
    let mean = (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / n);
    let std = mean
        .filter(|_| errs.len() > 1)
        .map(|m| (errs.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    CoefficientMetrics {
        support_exact_match: true,
        mean_percent: mean,
        std_percent: std,
        reason: None,
        terms,
    }
}

/// Relative l2 error of the network over full truth grids, all components
/// and branches stacked.
pub fn full_field_l2<N: FieldNet + ?Sized>(net: &N, truth: &[(usize, &FieldDataset)]) -> Result<f64, CliError> {
    let (mut num, mut den) = (0.0, 0.0);
    for &(branch, data) in truth {
        let requests: Vec<DerivRequest> = (0..data.n_fields())
            .map(|c| DerivRequest::value(data.points.dim(), c))
            .collect();
        let pred = evaluate(net, Some(branch), &data.points, &requests)?;
        for (p, t) in pred.iter().zip(&data.values) {
            num += (p - t).powi(2);
            den += t * t;
        }
    }
    Ok(relative_l2(num, den))
}

fn relative_l2(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

/// Relative l2 error between two flat value arrays.
pub fn field_l2(pred: &[f64], truth: &[f64]) -> f64 {
    let num = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    let den = truth.iter().map(|t| t * t).sum();
    relative_l2(num, den)
}

//! Symbolic candidate terms, their evaluation from field derivatives, and the
//! regression system `udot = phi * lambda`.

mod field;
mod matrix;

pub use field::{AnalyticField, FieldSource, NetField};
pub use matrix::{assemble, condition_number, evaluate_row, normalize_columns, rescale_coeffs, LibraryMatrix};

use crate::deriv::{total_order, DerivError, DerivRequest, MultiIndex, MAX_ORDER};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

pub const MAX_POWER: u32 = 5;

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("unknown builtin library `{0}` (expected burgers16, burgers_source30, ks36 or fn72)")]
    UnknownBuiltin(String),
    #[error("invalid library: {0}")]
    Invalid(String),
    #[error("non-finite library row at point {coords:?}")]
    NonFiniteRow { coords: Vec<f64> },
    #[error("library column for term `{symbol}` is identically zero")]
    DegenerateTerm { symbol: String },
    #[error("no collocation points")]
    Empty,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Deriv(#[from] DerivError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFn {
    Sin,
    Cos,
}

/// One multiplicative factor of a candidate term.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Factor {
    /// `u_c^power`
    Power { component: usize, power: u32 },
    /// `d^orders u_c`; `orders` has one entry per input coordinate.
    Derivative { component: usize, orders: MultiIndex },
    /// Sum of the second spatial derivatives of `u_c`.
    Laplacian { component: usize },
    /// `sin` or `cos` of one input coordinate.
    Source { function: SourceFn, coordinate: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub factors: Vec<Factor>,
    pub symbol: String,
    /// Multiplies the term's value; lets small terms (e.g. a weak constant
    /// forcing) be amplified or damped before regression.
    #[serde(default = "unit", skip_serializing_if = "is_unit")]
    pub scale: f64,
}

fn unit() -> f64 {
    1.0
}

fn is_unit(v: &f64) -> bool {
    *v == 1.0
}

/// Names used in symbols: fields `u, v, w, ...`; coordinates `x[, y], t` with
/// time always last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Naming {
    pub fields: Vec<String>,
    pub coords: Vec<String>,
}

impl Naming {
    pub fn new(input_dim: usize, output_dim: usize) -> Naming {
        const FIELDS: [&str; 6] = ["u", "v", "w", "p", "q", "r"];
        let fields = (0..output_dim)
            .map(|c| FIELDS.get(c).map(|s| s.to_string()).unwrap_or_else(|| format!("u{c}")))
            .collect();
        let coords = match input_dim {
            1 => vec!["t"],
            2 => vec!["x", "t"],
            3 => vec!["x", "y", "t"],
            _ => vec!["x", "y", "z", "t"],
        }
        .into_iter()
        .map(String::from)
        .collect();
        Naming { fields, coords }
    }

    fn factor(&self, f: &Factor) -> String {
        match f {
            Factor::Power { component, power } => match power {
                0 => "1".into(),
                1 => self.fields[*component].clone(),
                p => format!("{}^{p}", self.fields[*component]),
            },
            Factor::Derivative { component, orders } => {
                let mut s = format!("{}_", self.fields[*component]);
                for (i, &k) in orders.iter().enumerate() {
                    for _ in 0..k {
                        s.push_str(&self.coords[i]);
                    }
                }
                s
            }
            Factor::Laplacian { component } => format!("lap({})", self.fields[*component]),
            Factor::Source { function, coordinate } => {
                let f = match function {
                    SourceFn::Sin => "sin",
                    SourceFn::Cos => "cos",
                };
                format!("{f}({})", self.coords[*coordinate])
            }
        }
    }

    /// Canonical symbol: factors joined by `*`, repeated factors folded into
    /// a power, `1` for the empty product.
    pub fn symbol(&self, factors: &[Factor]) -> String {
        let mut parts: Vec<(String, u32)> = Vec::new();
        for f in factors {
            if matches!(f, Factor::Power { power: 0, .. }) {
                continue;
            }
            let s = self.factor(f);
            match parts.last_mut() {
                Some((last, n)) if *last == s => *n += 1,
                _ => parts.push((s, 1)),
            }
        }
        if parts.is_empty() {
            return "1".into();
        }
        parts
            .into_iter()
            .map(|(s, n)| if n == 1 { s } else { format!("{s}^{n}") })
            .collect::<Vec<_>>()
            .join("*")
    }

    pub fn time_derivative(&self, component: usize) -> String {
        format!("{}_{}", self.fields[component], self.coords.last().expect("coords"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibrarySpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub terms: Vec<TermSpec>,
    /// Set when a library deliberately omits the constant term.
    #[serde(default)]
    pub constant_excluded: bool,
}

impl LibrarySpec {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn naming(&self) -> Naming {
        Naming::new(self.input_dim, self.output_dim)
    }

    pub fn symbols(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.symbol.clone()).collect()
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.terms.iter().position(|t| t.symbol == symbol)
    }

    /// Builds a term with its canonical symbol.
    pub fn term(&self, factors: Vec<Factor>) -> TermSpec {
        TermSpec {
            symbol: self.naming().symbol(&factors),
            factors,
            scale: 1.0,
        }
    }

    pub fn from_json(text: &str) -> Result<LibrarySpec, LibraryError> {
        let spec: LibrarySpec =
            serde_json::from_str(text).map_err(|e| LibraryError::Invalid(format!("library JSON: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("library serializes")
    }

    /// Reorders terms; `order[k]` is the old index of the new `k`-th term.
    pub fn permuted(&self, order: &[usize]) -> LibrarySpec {
        LibrarySpec {
            terms: order.iter().map(|&i| self.terms[i].clone()).collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), LibraryError> {
        let bad = |m: String| Err(LibraryError::Invalid(m));
        if self.terms.is_empty() {
            return bad("library has no terms".into());
        }
        if !(2..=4).contains(&self.input_dim) || self.output_dim == 0 {
            return bad(format!(
                "unsupported dimensions: {} inputs, {} outputs",
                self.input_dim, self.output_dim
            ));
        }
        let mut seen = HashSet::new();
        for t in &self.terms {
            if !seen.insert(t.symbol.as_str()) {
                return bad(format!("duplicate term `{}`", t.symbol));
            }
            if !t.scale.is_finite() || t.scale == 0.0 {
                return bad(format!("term `{}` has invalid scale {}", t.symbol, t.scale));
            }
            let mut high_order = 0;
            for f in &t.factors {
                match f {
                    Factor::Power { component, power } => {
                        self.check_component(*component, &t.symbol)?;
                        if *power > MAX_POWER {
                            return bad(format!("term `{}`: power {power} exceeds {MAX_POWER}", t.symbol));
                        }
                    }
                    Factor::Derivative { component, orders } => {
                        self.check_component(*component, &t.symbol)?;
                        if orders.len() != self.input_dim {
                            return bad(format!(
                                "term `{}`: derivative has {} orders for {} coordinates",
                                t.symbol,
                                orders.len(),
                                self.input_dim
                            ));
                        }
                        let k = total_order(orders);
                        if k == 0 || k > MAX_ORDER {
                            return bad(format!("term `{}`: derivative order {k} out of range", t.symbol));
                        }
                        if k > 1 {
                            high_order += 1;
                        }
                    }
                    Factor::Laplacian { component } => {
                        self.check_component(*component, &t.symbol)?;
                        high_order += 1;
                    }
                    Factor::Source { coordinate, .. } => {
                        if *coordinate >= self.input_dim {
                            return bad(format!("term `{}`: coordinate {coordinate} out of range", t.symbol));
                        }
                    }
                }
            }
            if high_order > 1 {
                return bad(format!(
                    "term `{}` has more than one derivative factor of order above one",
                    t.symbol
                ));
            }
        }
        if !self.constant_excluded && !self.terms.iter().any(|t| t.factors.iter().all(is_constant)) {
            return bad("library lacks the constant term `1` (set constant_excluded to omit it)".into());
        }
        Ok(())
    }

    fn check_component(&self, c: usize, symbol: &str) -> Result<(), LibraryError> {
        if c >= self.output_dim {
            return Err(LibraryError::Invalid(format!(
                "term `{symbol}`: component {c} out of range ({} outputs)",
                self.output_dim
            )));
        }
        Ok(())
    }
}

fn is_constant(f: &Factor) -> bool {
    matches!(f, Factor::Power { power: 0, .. })
}

fn spatial_derivative(dim: usize, axis: usize, order: u32) -> MultiIndex {
    let mut m = vec![0; dim];
    m[axis] = order;
    m
}

/// `{1, u, ..., u^max_power} x {1, u_x, ..., d^max_order u}` in canonical order.
fn polynomial_times_derivatives(max_power: u32, max_order: u32) -> LibrarySpec {
    let mut spec = LibrarySpec {
        input_dim: 2,
        output_dim: 1,
        terms: Vec::new(),
        constant_excluded: false,
    };
    for p in 0..=max_power {
        for k in 0..=max_order {
            let mut factors = Vec::new();
            if p > 0 {
                factors.push(Factor::Power { component: 0, power: p });
            }
            if k > 0 {
                factors.push(Factor::Derivative {
                    component: 0,
                    orders: spatial_derivative(2, 0, k),
                });
            }
            let t = spec.term(factors);
            spec.terms.push(t);
        }
    }
    spec
}

fn burgers_source30() -> LibrarySpec {
    let mut spec = polynomial_times_derivatives(3, 3);
    let src = |function, coordinate| Factor::Source { function, coordinate };
    let a = src(SourceFn::Sin, 1);
    let b = src(SourceFn::Sin, 0);
    let c = src(SourceFn::Cos, 1);
    let d = src(SourceFn::Cos, 0);
    let combos: Vec<Vec<Factor>> = vec![
        vec![a.clone()],
        vec![b.clone()],
        vec![c.clone()],
        vec![d.clone()],
        vec![a.clone(), a.clone()],
        vec![b.clone(), b.clone()],
        vec![c.clone(), c.clone()],
        vec![d.clone(), d.clone()],
        vec![a.clone(), c.clone()],
        vec![a.clone(), b.clone()],
        vec![a.clone(), d.clone()],
        vec![b.clone(), c.clone()],
        vec![b, d.clone()],
        vec![c, d],
    ];
    for f in combos {
        let t = spec.term(f);
        spec.terms.push(t);
    }
    spec
}

/// Two-field reaction-diffusion library in `(x, y, t)`: polynomials of
/// `(u, v)` up to degree 3 times `{1, u_x, u_y, u_xy, v_x, v_y, v_xy}`, plus
/// the two Laplacians.
fn fn72() -> LibrarySpec {
    let mut spec = LibrarySpec {
        input_dim: 3,
        output_dim: 2,
        terms: Vec::new(),
        constant_excluded: false,
    };
    let mut monomials: Vec<(u32, u32)> = Vec::new();
    for deg in 0..=3u32 {
        for pv in 0..=deg {
            monomials.push((deg - pv, pv));
        }
    }
    let derivs: Vec<Option<Factor>> = std::iter::once(None)
        .chain((0..2).flat_map(|c| {
            [[1, 0, 0], [0, 1, 0], [1, 1, 0]].into_iter().map(move |o| {
                Some(Factor::Derivative {
                    component: c,
                    orders: o.to_vec(),
                })
            })
        }))
        .collect();
    for &(pu, pv) in &monomials {
        for d in &derivs {
            let mut factors = Vec::new();
            if pu > 0 {
                factors.push(Factor::Power { component: 0, power: pu });
            }
            if pv > 0 {
                factors.push(Factor::Power { component: 1, power: pv });
            }
            factors.extend(d.clone());
            let t = spec.term(factors);
            spec.terms.push(t);
        }
    }
    for c in 0..2 {
        let t = spec.term(vec![Factor::Laplacian { component: c }]);
        spec.terms.push(t);
    }
    spec
}

pub fn builtin_library(name: &str) -> Result<LibrarySpec, LibraryError> {
    let spec = match name {
        "burgers16" => polynomial_times_derivatives(3, 3),
        "ks36" => polynomial_times_derivatives(5, 5),
        "burgers_source30" => burgers_source30(),
        "fn72" => fn72(),
        other => return Err(LibraryError::UnknownBuiltin(other.to_string())),
    };
    debug_assert!(spec.validate().is_ok());
    Ok(spec)
}

/// How one factor reads the derivative table.
#[derive(Debug, Clone)]
enum Compiled {
    Power { slot: usize, power: u32 },
    Sum { slots: Vec<usize> },
    Source { function: SourceFn, coordinate: usize },
}

impl Compiled {
    fn value(&self, values: &[f64], coords: &[f64]) -> f64 {
        match self {
            Compiled::Power { slot, power } => values[*slot].powi(*power as i32),
            Compiled::Sum { slots } => slots.iter().map(|&s| values[s]).sum(),
            Compiled::Source { function, coordinate } => match function {
                SourceFn::Sin => coords[*coordinate].sin(),
                SourceFn::Cos => coords[*coordinate].cos(),
            },
        }
    }

    /// Adds `weight * d factor / d values` into `grad`.
    fn add_gradient(&self, values: &[f64], weight: f64, grad: &mut [f64]) {
        match self {
            Compiled::Power { slot, power } => {
                let p = *power as i32;
                grad[*slot] += weight * p as f64 * values[*slot].powi(p - 1);
            }
            Compiled::Sum { slots } => slots.iter().for_each(|&s| grad[s] += weight),
            Compiled::Source { .. } => {}
        }
    }
}

/// A library resolved to a flat list of derivative requests.
///
/// `requests()[..output_dim]` are the time derivatives `u_t` of each
/// component; the remaining requests are the distinct factors the terms read.
#[derive(Debug, Clone)]
pub struct CompiledLibrary {
    spec: LibrarySpec,
    requests: Vec<DerivRequest>,
    terms: Vec<(f64, Vec<Compiled>)>,
}

impl CompiledLibrary {
    pub fn new(spec: &LibrarySpec) -> Result<CompiledLibrary, LibraryError> {
        spec.validate()?;
        let dim = spec.input_dim;
        let mut requests: Vec<DerivRequest> = (0..spec.output_dim)
            .map(|c| DerivRequest::new(spatial_derivative(dim, dim - 1, 1), c))
            .collect();
        let mut slot = |r: DerivRequest| -> usize {
            if let Some(i) = requests.iter().position(|q| *q == r) {
                i
            } else {
                requests.push(r);
                requests.len() - 1
            }
        };
        let mut terms = Vec::with_capacity(spec.len());
        for t in &spec.terms {
            let mut factors = Vec::new();
            for f in &t.factors {
                match f {
                    Factor::Power { power: 0, .. } => {}
                    Factor::Power { component, power } => factors.push(Compiled::Power {
                        slot: slot(DerivRequest::value(dim, *component)),
                        power: *power,
                    }),
                    Factor::Derivative { component, orders } => factors.push(Compiled::Power {
                        slot: slot(DerivRequest::new(orders.clone(), *component)),
                        power: 1,
                    }),
                    Factor::Laplacian { component } => {
                        let slots = (0..dim - 1)
                            .map(|a| slot(DerivRequest::new(spatial_derivative(dim, a, 2), *component)))
                            .collect();
                        factors.push(Compiled::Sum { slots })
                    }
                    Factor::Source { function, coordinate } => factors.push(Compiled::Source {
                        function: *function,
                        coordinate: *coordinate,
                    }),
                }
            }
            terms.push((t.scale, factors));
        }
        Ok(CompiledLibrary {
            spec: spec.clone(),
            requests,
            terms,
        })
    }

    pub fn spec(&self) -> &LibrarySpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn requests(&self) -> &[DerivRequest] {
        &self.requests
    }

    pub fn term_value(&self, j: usize, values: &[f64], coords: &[f64]) -> f64 {
        let (scale, factors) = &self.terms[j];
        factors.iter().fold(*scale, |acc, f| acc * f.value(values, coords))
    }

    /// Adds `weight * d phi_j / d values` into `grad` (product rule over the
    /// term's factors).
    pub fn term_gradient(&self, j: usize, values: &[f64], coords: &[f64], weight: f64, grad: &mut [f64]) {
        let (scale, factors) = &self.terms[j];
        for (i, f) in factors.iter().enumerate() {
            let others = factors
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != i)
                .fold(*scale, |acc, (_, g)| acc * g.value(values, coords));
            if others != 0.0 {
                f.add_gradient(values, weight * others, grad);
            }
        }
    }

    /// Fills `udot` (length `output_dim`) and `phi` (length `len()`) from one
    /// row of derivative values.
    pub fn row(&self, values: &[f64], coords: &[f64], udot: &mut [f64], phi: &mut [f64]) {
        udot.copy_from_slice(&values[..self.spec.output_dim]);
        for (j, p) in phi.iter_mut().enumerate() {
            *p = self.term_value(j, values, coords);
        }
    }

    /// The same library restricted to `terms` (indices into this one), e.g.
    /// the active support after thresholding.
    pub fn restricted(&self, terms: &[usize]) -> Result<CompiledLibrary, LibraryError> {
        let spec = LibrarySpec {
            terms: terms.iter().map(|&j| self.spec.terms[j].clone()).collect(),
            constant_excluded: true,
            ..self.spec.clone()
        };
        if spec.terms.is_empty() {
            // keep u_t requests so residual losses remain defined
            let dim = spec.input_dim;
            return Ok(CompiledLibrary {
                requests: (0..spec.output_dim)
                    .map(|c| DerivRequest::new(spatial_derivative(dim, dim - 1, 1), c))
                    .collect(),
                spec,
                terms: Vec::new(),
            });
        }
        CompiledLibrary::new(&spec)
    }
}

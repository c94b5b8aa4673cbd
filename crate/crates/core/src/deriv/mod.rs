//! Exact input derivatives of a network and parameter gradients of losses
//! built from them.
//!
//! Derivatives are obtained by propagating truncated multivariate Taylor
//! polynomials through the network (see [`DerivStructure`]). Parameter
//! gradients run the recorded layer values backwards through the same
//! coefficient arithmetic, so a loss containing `u_xxxx` costs one forward and
//! one reverse sweep per batch of points.

mod engine;
pub mod jet;
pub mod structure;

pub use jet::Jet;
pub use structure::{multi_factorial, total_order, DerivStructure, MultiIndex, MAX_ORDER};

use crate::network::{FieldNet, NetworkError};
use crate::points::PointSet;
use rayon::prelude::*;
use thiserror::Error;

/// Points per engine batch. Results do not depend on it beyond rounding order,
/// and the reduction across batches always runs in batch order.
pub const BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum DerivError {
    #[error("derivative order {order} exceeds the supported maximum {MAX_ORDER}")]
    UnsupportedOrder { order: u32 },
    #[error("non-finite input coordinate at point {point}")]
    Domain { point: usize },
    #[error("output component {component} out of range ({count} components)")]
    Component { component: usize, count: usize },
    #[error("request has {got} coordinates, network takes {expected}")]
    RequestDimension { expected: usize, got: usize },
    #[error("non-finite loss at point {point} (component {component:?})")]
    NonFiniteLoss { point: usize, component: Option<usize> },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// One partial derivative `d^alpha u_c` of one output component.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DerivRequest {
    pub multi_index: MultiIndex,
    pub output_component: usize,
}

impl DerivRequest {
    pub fn new(multi_index: MultiIndex, output_component: usize) -> Self {
        DerivRequest {
            multi_index,
            output_component,
        }
    }

    /// The plain value `u_c`.
    pub fn value(dim: usize, output_component: usize) -> Self {
        DerivRequest::new(vec![0; dim], output_component)
    }
}

/// `d loss / d theta` in the network's canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A loss that is a sum of per-point terms, each a function of a fixed list of
/// derivative values at that point.
pub trait PointObjective: Sync {
    fn requests(&self) -> &[DerivRequest];

    /// Length of an auxiliary gradient accumulated alongside the parameter
    /// gradient (e.g. for PDE coefficients). Defaults to none.
    fn aux_len(&self) -> usize {
        0
    }

    /// Returns this point's loss contribution. `values[r]` is the derivative
    /// named by `requests()[r]`; the callee writes `d loss / d values[r]` into
    /// `grad[r]` (pre-zeroed) and adds into `aux_grad`.
    fn eval(
        &self,
        point: usize,
        coords: &[f64],
        values: &[f64],
        grad: &mut [f64],
        aux_grad: &mut [f64],
    ) -> f64;
}

#[derive(Debug, Clone)]
pub struct LossGradient {
    pub value: f64,
    pub gradient: GradientVector,
    pub aux: Vec<f64>,
}

/// Requests resolved against a structure: (component, coefficient index,
/// factor from Taylor coefficient to derivative).
pub(crate) struct Resolved {
    pub structure: DerivStructure,
    slots: Vec<(usize, usize, f64)>,
}

impl Resolved {
    pub fn new(dim: usize, n_out: usize, requests: &[DerivRequest]) -> Result<Resolved, DerivError> {
        for r in requests {
            if r.multi_index.len() != dim {
                return Err(DerivError::RequestDimension {
                    expected: dim,
                    got: r.multi_index.len(),
                });
            }
            let order = total_order(&r.multi_index);
            if order > MAX_ORDER {
                return Err(DerivError::UnsupportedOrder { order });
            }
            if r.output_component >= n_out {
                return Err(DerivError::Component {
                    component: r.output_component,
                    count: n_out,
                });
            }
        }
        let idx: Vec<MultiIndex> = requests.iter().map(|r| r.multi_index.clone()).collect();
        let structure = DerivStructure::closure(dim, &idx);
        let slots = requests
            .iter()
            .map(|r| {
                (
                    r.output_component,
                    structure.index_of(&r.multi_index).expect("closure contains request"),
                    multi_factorial(&r.multi_index),
                )
            })
            .collect();
        Ok(Resolved { structure, slots })
    }

    fn read(&self, out: &[f64], p: usize, j: usize, values: &mut [f64]) {
        let cols = self.structure.len() * p;
        for (v, &(c, s, f)) in values.iter_mut().zip(&self.slots) {
            *v = f * out[c * cols + s * p + j];
        }
    }

    fn write_adjoint(&self, d_out: &mut [f64], p: usize, j: usize, grad: &[f64]) {
        let cols = self.structure.len() * p;
        for (g, &(c, s, f)) in grad.iter().zip(&self.slots) {
            d_out[c * cols + s * p + j] += f * g;
        }
    }
}

fn check_points(points: &PointSet, dim: usize) -> Result<(), DerivError> {
    if points.dim() != dim {
        return Err(NetworkError::InputDimension {
            expected: dim,
            got: points.dim(),
        }
        .into());
    }
    if let Some(bad) = points.rows().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(DerivError::Domain { point: bad });
    }
    Ok(())
}

/// Evaluates every request at every point. Returns a row-major
/// `points x requests` table.
pub fn evaluate<N: FieldNet + ?Sized>(
    net: &N,
    branch: Option<usize>,
    points: &PointSet,
    requests: &[DerivRequest],
) -> Result<Vec<f64>, DerivError> {
    let b = net.resolve_branch(branch)?;
    check_points(points, net.input_dim())?;
    let res = Resolved::new(net.input_dim(), net.output_dim(), requests)?;
    let chain = net.chain(b);
    let nr = requests.len();
    let d = points.dim();
    let chunks: Vec<Vec<f64>> = points
        .coords()
        .par_chunks(BATCH * d)
        .map(|coords| {
            let tape = engine::forward(&chain, net.scaling(), &res.structure, coords);
            let p = tape.points;
            let mut rows = vec![0.0; p * nr];
            for j in 0..p {
                res.read(tape.output(), p, j, &mut rows[j * nr..(j + 1) * nr]);
            }
            rows
        })
        .collect();
    Ok(chunks.concat())
}

/// Raw derivatives `d^k u_c / d x_direction^k`, `k = 0..=order`, for every
/// output component `c`.
pub fn jet_propagate<N: FieldNet + ?Sized>(
    net: &N,
    branch: Option<usize>,
    point: &[f64],
    direction: usize,
    order: u32,
) -> Result<Vec<Vec<f64>>, DerivError> {
    if order > MAX_ORDER {
        return Err(DerivError::UnsupportedOrder { order });
    }
    let dim = net.input_dim();
    if direction >= dim {
        return Err(DerivError::RequestDimension {
            expected: dim,
            got: direction + 1,
        });
    }
    let n_out = net.output_dim();
    let requests: Vec<DerivRequest> = (0..n_out)
        .flat_map(|c| {
            (0..=order).map(move |k| {
                let mut alpha = vec![0; dim];
                alpha[direction] = k;
                DerivRequest::new(alpha, c)
            })
        })
        .collect();
    let pts = PointSet::new(dim, point.to_vec());
    let flat = evaluate(net, branch, &pts, &requests)?;
    Ok(flat.chunks(order as usize + 1).map(<[f64]>::to_vec).collect())
}

pub fn mixed_partial<N: FieldNet + ?Sized>(
    net: &N,
    branch: Option<usize>,
    point: &[f64],
    request: &DerivRequest,
) -> Result<f64, DerivError> {
    let pts = PointSet::new(point.len(), point.to_vec());
    Ok(evaluate(net, branch, &pts, std::slice::from_ref(request))?[0])
}

/// Value and parameter gradient of `sum_points objective(point)` for one branch.
pub fn loss_param_gradient<N: FieldNet + ?Sized, O: PointObjective>(
    net: &N,
    branch: Option<usize>,
    points: &PointSet,
    objective: &O,
) -> Result<LossGradient, DerivError> {
    let b = net.resolve_branch(branch)?;
    check_points(points, net.input_dim())?;
    let requests = objective.requests();
    let res = Resolved::new(net.input_dim(), net.output_dim(), requests)?;
    let chain = net.chain(b);
    let n_params = net.param_count();
    let nr = requests.len();
    let d = points.dim();
    let n_out = net.output_dim();

    let parts: Vec<Result<(f64, Vec<f64>, Vec<f64>), DerivError>> = points
        .coords()
        .par_chunks(BATCH * d)
        .enumerate()
        .map(|(ci, coords)| {
            let tape = engine::forward(&chain, net.scaling(), &res.structure, coords);
            let p = tape.points;
            let out = tape.output();
            let mut d_out = vec![0.0; out.len()];
            let mut aux = vec![0.0; objective.aux_len()];
            let mut values = vec![0.0; nr];
            let mut grad = vec![0.0; nr];
            let mut total = 0.0;
            for j in 0..p {
                let point = ci * BATCH + j;
                res.read(out, p, j, &mut values);
                grad.fill(0.0);
                let l = objective.eval(point, &coords[j * d..(j + 1) * d], &values, &mut grad, &mut aux);
                if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    let component = values
                        .iter()
                        .position(|v| !v.is_finite())
                        .map(|r| requests[r].output_component)
                        .or_else(|| (n_out == 1).then_some(0));
                    return Err(DerivError::NonFiniteLoss { point, component });
                }
                total += l;
                res.write_adjoint(&mut d_out, p, j, &grad);
            }
            let mut g = vec![0.0; n_params];
            engine::backward(&chain, &res.structure, &tape, &d_out, &mut g);
            Ok((total, g, aux))
        })
        .collect();

    let mut value = 0.0;
    let mut gradient = vec![0.0; n_params];
    let mut aux = vec![0.0; objective.aux_len()];
    for part in parts {
        let (v, g, a) = part?;
        value += v;
        gradient.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
        aux.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
    }
    Ok(LossGradient {
        value,
        gradient: GradientVector { values: gradient },
        aux,
    })
}

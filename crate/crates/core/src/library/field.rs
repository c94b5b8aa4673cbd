use crate::deriv::{evaluate, DerivError, DerivRequest};
use crate::network::FieldNet;
use crate::points::PointSet;
use std::fmt;
use std::sync::Arc;

/// Anything that can report partial derivatives of a vector field at points:
/// a trained network branch, or a closed-form reference field.
pub trait FieldSource: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Row-major `points x requests` table of raw derivatives.
    fn derivatives(&self, points: &PointSet, requests: &[DerivRequest]) -> Result<Vec<f64>, DerivError>;
}

/// One branch of a network viewed as a field.
pub struct NetField<'a, N: FieldNet + ?Sized> {
    pub net: &'a N,
    pub branch: Option<usize>,
}

impl<'a, N: FieldNet + ?Sized> NetField<'a, N> {
    pub fn new(net: &'a N, branch: Option<usize>) -> Self {
        NetField { net, branch }
    }
}

impl<N: FieldNet + ?Sized> FieldSource for NetField<'_, N> {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.net.output_dim()
    }
    fn derivatives(&self, points: &PointSet, requests: &[DerivRequest]) -> Result<Vec<f64>, DerivError> {
        evaluate(self.net, self.branch, points, requests)
    }
}

type DerivFn = dyn Fn(&[f64], &DerivRequest) -> f64 + Send + Sync;

/// A field given by closed-form derivatives.
#[derive(Clone)]
pub struct AnalyticField {
    input_dim: usize,
    output_dim: usize,
    f: Arc<DerivFn>,
}

impl fmt::Debug for AnalyticField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnalyticField")
            .field("input_dim", &self.input_dim)
            .field("output_dim", &self.output_dim)
            .finish_non_exhaustive()
    }
}

/// `d^n/dz^n sin(z)`.
pub(crate) fn sin_derivative(n: u32, z: f64) -> f64 {
    match n % 4 {
        0 => z.sin(),
        1 => z.cos(),
        2 => -z.sin(),
        _ => -z.cos(),
    }
}

impl AnalyticField {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        f: impl Fn(&[f64], &DerivRequest) -> f64 + Send + Sync + 'static,
    ) -> Self {
        AnalyticField {
            input_dim,
            output_dim,
            f: Arc::new(f),
        }
    }

    /// `sum_m a_m exp(-nu k_m^2 t) sin(k_m x)` on `(x, t)`: solves `u_t = nu u_xx`.
    pub fn diffusion_modes(nu: f64, modes: &[(f64, f64)]) -> Self {
        let modes = modes.to_vec();
        AnalyticField::new(2, 1, move |p, r| {
            let (a, b) = (r.multi_index[0], r.multi_index[1]);
            modes
                .iter()
                .map(|&(k, amp)| {
                    let rate = -nu * k * k;
                    amp * k.powi(a as i32) * rate.powi(b as i32) * (rate * p[1]).exp() * sin_derivative(a, k * p[0])
                })
                .sum()
        })
    }

    /// `sin(x - c t)`: solves `u_t = -c u_x`.
    pub fn advection(c: f64) -> Self {
        AnalyticField::new(2, 1, move |p, r| {
            let (a, b) = (r.multi_index[0], r.multi_index[1]);
            (-c).powi(b as i32) * sin_derivative(a + b, p[0] - c * p[1])
        })
    }

    pub fn value(&self, point: &[f64], component: usize) -> f64 {
        (self.f)(point, &DerivRequest::value(self.input_dim, component))
    }
}

impl FieldSource for AnalyticField {
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn output_dim(&self) -> usize {
        self.output_dim
    }
    fn derivatives(&self, points: &PointSet, requests: &[DerivRequest]) -> Result<Vec<f64>, DerivError> {
        let mut out = Vec::with_capacity(points.len() * requests.len());
        for p in points.rows() {
            for r in requests {
                out.push((self.f)(p, r));
            }
        }
        Ok(out)
    }
}

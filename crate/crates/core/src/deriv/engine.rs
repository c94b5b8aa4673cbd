//! Batched Taylor-coefficient propagation through a dense chain, and the
//! matching reverse pass.
//!
//! Every layer value is a block of `width x (S * P)` numbers: `S` Taylor
//! coefficients (one per multi-index of the [`DerivStructure`]) for each of `P`
//! points, stored row-major with column `s * P + p`. The affine part of a layer
//! is one GEMM over all columns; activations run the coefficient recurrences
//! with the point index innermost.

use super::structure::DerivStructure;
use crate::network::{ActivationKind, ChainLink, InputScaling};

pub(crate) struct LayerTape {
    pre: Vec<f64>,
    out: Vec<f64>,
    aux: Vec<f64>,
}

/// Values recorded by [`forward`] for the reverse pass.
pub(crate) struct Tape {
    pub points: usize,
    input: Vec<f64>,
    layers: Vec<LayerTape>,
}

impl Tape {
    /// Output coefficients, `n_out x (S * P)`.
    pub fn output(&self) -> &[f64] {
        match self.layers.last() {
            Some(l) => &l.out,
            None => &self.input,
        }
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie within the given slices;
    // `c` is row-major m x n and exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Input jets: each coordinate's normalized value, with slope equal to the
/// normalization factor so outputs carry physical-unit derivatives.
fn seed_inputs(st: &DerivStructure, scaling: &InputScaling, coords: &[f64]) -> Vec<f64> {
    let d = st.dim();
    let p = coords.len() / d;
    let cols = st.len() * p;
    let mut x = vec![0.0; d * cols];
    let mut unit = vec![0; d];
    for i in 0..d {
        let row = &mut x[i * cols..(i + 1) * cols];
        for j in 0..p {
            row[j] = scaling.normalize(i, coords[j * d + i]);
        }
        unit[i] = 1;
        if let Some(s) = st.index_of(&unit) {
            row[s * p..(s + 1) * p].fill(scaling.factor(i));
        }
        unit[i] = 0;
    }
    x
}

pub(crate) fn forward(
    chain: &[ChainLink<'_>],
    scaling: &InputScaling,
    st: &DerivStructure,
    coords: &[f64],
) -> Tape {
    let p = coords.len() / st.dim();
    let cols = st.len() * p;
    let input = seed_inputs(st, scaling, coords);
    let mut layers: Vec<LayerTape> = Vec::with_capacity(chain.len());
    for link in chain {
        let layer = link.layer;
        let x = layers.last().map(|l| l.out.as_slice()).unwrap_or(&input);
        let mut pre = vec![0.0; layer.n_out * cols];
        gemm(
            layer.n_out,
            layer.n_in,
            cols,
            &layer.weights,
            (layer.n_in as isize, 1),
            x,
            (cols as isize, 1),
            0.0,
            &mut pre,
        );
        for (i, b) in layer.bias.iter().enumerate() {
            pre[i * cols..i * cols + p].iter_mut().for_each(|v| *v += b);
        }
        let (out, aux) = match layer.activation {
            ActivationKind::Linear => (pre.clone(), Vec::new()),
            ActivationKind::Tanh => activate(&pre, layer.n_out, cols, |a, y, q| tanh_forward(st, p, a, y, q)),
            ActivationKind::Sin => activate(&pre, layer.n_out, cols, |a, y, c| sin_forward(st, p, a, y, c)),
        };
        layers.push(LayerTape { pre, out, aux });
    }
    Tape { points: p, input, layers }
}

fn activate(
    pre: &[f64],
    rows: usize,
    cols: usize,
    mut f: impl FnMut(&[f64], &mut [f64], &mut [f64]),
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * cols];
    let mut aux = vec![0.0; rows * cols];
    for r in 0..rows {
        let span = r * cols..(r + 1) * cols;
        f(&pre[span.clone()], &mut out[span.clone()], &mut aux[span]);
    }
    (out, aux)
}

/// Reverse pass: accumulates `d loss / d params` into `grad` (indexed by the
/// chain offsets) given the adjoint of the output coefficients.
pub(crate) fn backward(
    chain: &[ChainLink<'_>],
    st: &DerivStructure,
    tape: &Tape,
    d_out: &[f64],
    grad: &mut [f64],
) {
    let p = tape.points;
    let cols = st.len() * p;
    let mut d_y = d_out.to_vec();
    for (li, link) in chain.iter().enumerate().rev() {
        let layer = link.layer;
        let lt = &tape.layers[li];
        let d_pre = match layer.activation {
            ActivationKind::Linear => std::mem::take(&mut d_y),
            ActivationKind::Tanh => {
                let mut d_pre = vec![0.0; layer.n_out * cols];
                for r in 0..layer.n_out {
                    let s = r * cols..(r + 1) * cols;
                    tanh_backward(
                        st,
                        p,
                        &lt.pre[s.clone()],
                        &lt.out[s.clone()],
                        &lt.aux[s.clone()],
                        &mut d_y[s.clone()],
                        &mut d_pre[s],
                    );
                }
                d_pre
            }
            ActivationKind::Sin => {
                let mut d_pre = vec![0.0; layer.n_out * cols];
                for r in 0..layer.n_out {
                    let s = r * cols..(r + 1) * cols;
                    sin_backward(
                        st,
                        p,
                        &lt.pre[s.clone()],
                        &lt.out[s.clone()],
                        &lt.aux[s.clone()],
                        &d_y[s.clone()],
                        &mut d_pre[s],
                    );
                }
                d_pre
            }
        };
        let x = if li == 0 { &tape.input } else { &tape.layers[li - 1].out };
        let nw = layer.n_in * layer.n_out;
        let (gw, gb) = grad[link.offset..link.offset + nw + layer.n_out].split_at_mut(nw);
        // dW += dPre * X^T
        gemm(
            layer.n_out,
            cols,
            layer.n_in,
            &d_pre,
            (cols as isize, 1),
            x,
            (1, cols as isize),
            1.0,
            gw,
        );
        for (i, g) in gb.iter_mut().enumerate() {
            *g += d_pre[i * cols..i * cols + p].iter().sum::<f64>();
        }
        if li > 0 {
            // dX = W^T * dPre
            let mut d_x = vec![0.0; layer.n_in * cols];
            gemm(
                layer.n_in,
                layer.n_out,
                cols,
                &layer.weights,
                (1, layer.n_in as isize),
                &d_pre,
                (cols as isize, 1),
                0.0,
                &mut d_x,
            );
            d_y = d_x;
        }
    }
}

#[inline]
fn block(v: &[f64], s: usize, p: usize) -> &[f64] {
    &v[s * p..(s + 1) * p]
}

/// y = tanh(a), q = 1 - y^2; degree-k coefficients from
/// `|alpha| y_alpha = sum |beta| a_beta q_(alpha-beta)`.
fn tanh_forward(st: &DerivStructure, p: usize, a: &[f64], y: &mut [f64], q: &mut [f64]) {
    for j in 0..p {
        let t = a[j].tanh();
        y[j] = t;
        q[j] = 1.0 - t * t;
    }
    let mut acc = vec![0.0; p];
    for g in st.order_groups().iter().skip(1).cloned() {
        for alpha in g.clone() {
            acc.fill(0.0);
            for &(b, c, w) in st.euler(alpha) {
                let (ab, qc) = (block(a, b, p), block(q, c, p));
                for j in 0..p {
                    acc[j] += w * ab[j] * qc[j];
                }
            }
            y[alpha * p..(alpha + 1) * p].copy_from_slice(&acc);
        }
        for alpha in g {
            acc.fill(0.0);
            for &(m, n) in st.products(alpha) {
                let (ym, yn) = (block(y, m, p), block(y, n, p));
                for j in 0..p {
                    acc[j] -= ym[j] * yn[j];
                }
            }
            q[alpha * p..(alpha + 1) * p].copy_from_slice(&acc);
        }
    }
}

fn tanh_backward(
    st: &DerivStructure,
    p: usize,
    a: &[f64],
    y: &[f64],
    q: &[f64],
    d_y: &mut [f64],
    d_a: &mut [f64],
) {
    let mut d_q = vec![0.0; y.len()];
    for g in st.order_groups().iter().skip(1).rev().cloned() {
        for alpha in g.clone() {
            for &(m, n) in st.products(alpha) {
                for j in 0..p {
                    let dq = d_q[alpha * p + j];
                    d_y[m * p + j] -= dq * y[n * p + j];
                    d_y[n * p + j] -= dq * y[m * p + j];
                }
            }
        }
        for alpha in g {
            for &(b, c, w) in st.euler(alpha) {
                for j in 0..p {
                    let dy = w * d_y[alpha * p + j];
                    d_a[b * p + j] += dy * q[c * p + j];
                    d_q[c * p + j] += dy * a[b * p + j];
                }
            }
        }
    }
    for j in 0..p {
        d_y[j] -= 2.0 * d_q[j] * y[j];
        d_a[j] += d_y[j] * q[j];
    }
}

/// y = sin(a), c = cos(a), coupled recurrences.
fn sin_forward(st: &DerivStructure, p: usize, a: &[f64], y: &mut [f64], c: &mut [f64]) {
    for j in 0..p {
        let (s, co) = a[j].sin_cos();
        y[j] = s;
        c[j] = co;
    }
    let mut acc_s = vec![0.0; p];
    let mut acc_c = vec![0.0; p];
    for alpha in 1..st.len() {
        acc_s.fill(0.0);
        acc_c.fill(0.0);
        for &(b, g, w) in st.euler(alpha) {
            let (ab, cg, sg) = (block(a, b, p), block(c, g, p), block(y, g, p));
            for j in 0..p {
                acc_s[j] += w * ab[j] * cg[j];
                acc_c[j] -= w * ab[j] * sg[j];
            }
        }
        y[alpha * p..(alpha + 1) * p].copy_from_slice(&acc_s);
        c[alpha * p..(alpha + 1) * p].copy_from_slice(&acc_c);
    }
}

fn sin_backward(
    st: &DerivStructure,
    p: usize,
    a: &[f64],
    y: &[f64],
    c: &[f64],
    d_y_in: &[f64],
    d_a: &mut [f64],
) {
    let mut d_y = d_y_in.to_vec();
    let mut d_c = vec![0.0; y.len()];
    for alpha in (1..st.len()).rev() {
        for &(b, g, w) in st.euler(alpha) {
            for j in 0..p {
                let dy = w * d_y[alpha * p + j];
                let dc = w * d_c[alpha * p + j];
                d_a[b * p + j] += dy * c[g * p + j] - dc * y[g * p + j];
                d_c[g * p + j] += dy * a[b * p + j];
                d_y[g * p + j] -= dc * a[b * p + j];
            }
        }
    }
    for j in 0..p {
        d_a[j] += d_y[j] * c[j] - d_c[j] * y[j];
    }
}

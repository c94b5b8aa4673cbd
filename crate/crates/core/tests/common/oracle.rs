//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use pdediscover::network::{init_params, ActivationKind, LayerSpec, MlpParams, MlpShape};

/// Fornberg's algorithm: weights of the `order`-th derivative at 0 for the
/// given node offsets.
pub fn fornberg_weights(order: usize, nodes: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    let mut c = vec![vec![0.0; order + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = nodes[0];
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i];
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.iter().map(|row| row[order]).collect()
}

/// Central finite difference of `f` at `x0` using `2 * half + 1` equispaced nodes.
pub fn central_fd(f: &dyn Fn(f64) -> f64, x0: f64, order: usize, h: f64, half: usize) -> f64 {
    let offsets: Vec<f64> = (-(half as i64)..=half as i64).map(|j| j as f64).collect();
    let w = fornberg_weights(order, &offsets);
    let sum: f64 = offsets.iter().zip(&w).map(|(o, w)| w * f(x0 + o * h)).sum();
    sum / h.powi(order as i32)
}

/// Step and stencil half-width tuned per order so truncation and rounding
/// errors both stay far below the test tolerances for unit-scale networks.
pub fn fd_settings(order: usize) -> (f64, usize) {
    match order {
        0 => (0.0, 0),
        1 => (1e-2, 4),
        2 => (1e-2, 4),
        3 => (2e-2, 5),
        4 => (4e-2, 6),
        _ => (6e-2, 7),
    }
}

pub fn fd_derivative(f: &dyn Fn(f64) -> f64, x0: f64, order: usize) -> f64 {
    if order == 0 {
        return f(x0);
    }
    let (h, half) = fd_settings(order);
    central_fd(f, x0, order, h, half)
}

pub fn random_mlp(seed: u64, activation: ActivationKind, depth: usize, width: usize, input_dim: usize, outputs: usize) -> MlpParams {
    let mut net = init_params(
        &MlpShape {
            input_dim,
            hidden: LayerSpec::stack(depth, width, activation),
            output_dim: outputs,
        },
        seed,
    )
    .unwrap();
    // non-zero biases so even-order terms do not vanish by symmetry
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    for layer in &mut net.layers {
        for b in &mut layer.bias {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *b = ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.6;
        }
    }
    net
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Coefficients of the polynomial `P_k` with `tanh^(k)(x) = P_k(tanh x)`.
pub fn tanh_derivative_poly(k: usize) -> Vec<f64> {
    let mut p = vec![0.0, 1.0];
    for _ in 0..k {
        // P' (t) * (1 - t^2)
        let dp: Vec<f64> = (1..p.len()).map(|i| i as f64 * p[i]).collect();
        let mut next = vec![0.0; dp.len() + 2];
        for (i, c) in dp.iter().enumerate() {
            next[i] += c;
            next[i + 2] -= c;
        }
        p = next;
    }
    p
}

pub fn eval_poly(p: &[f64], t: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

/// Ridge solution from the augmented least-squares system `[phi; sqrt(p) I]`
/// solved by SVD (no normal equations).
pub fn ridge_oracle(phi: &nalgebra::DMatrix<f64>, u: &nalgebra::DVector<f64>, penalty: f64) -> nalgebra::DVector<f64> {
    let (n, k) = phi.shape();
    let mut a = nalgebra::DMatrix::zeros(n + k, k);
    a.view_mut((0, 0), (n, k)).copy_from(phi);
    for j in 0..k {
        a[(n + j, j)] = penalty.sqrt();
    }
    let mut b = nalgebra::DVector::zeros(n + k);
    b.rows_mut(0, n).copy_from(u);
    a.svd(true, true).solve(&b, 1e-14).unwrap()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// `sigma_max / sigma_min` from the eigenvalues of `A^T A`.
pub fn condition_oracle(a: &nalgebra::DMatrix<f64>) -> f64 {
    let k = a.ncols();
    let ata: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| a.column(i).dot(&a.column(j))).collect())
        .collect();
    let ev = jacobi_eigenvalues(ata);
    let hi = ev.iter().cloned().fold(f64::MIN, f64::max);
    let lo = ev.iter().cloned().fold(f64::MAX, f64::min);
    (hi / lo).sqrt()
}

/// Exhaustive search over all supports: ridge fit on the training rows,
/// scored by `||phi_va l - u_va||^2 + gamma |support|`. Returns (support, coeffs, score).
pub fn best_subset(
    phi_tr: &nalgebra::DMatrix<f64>,
    u_tr: &nalgebra::DVector<f64>,
    phi_va: &nalgebra::DMatrix<f64>,
    u_va: &nalgebra::DVector<f64>,
    gamma: f64,
    penalty: f64,
) -> (Vec<bool>, Vec<f64>, f64) {
    let s = phi_tr.ncols();
    let mut best = (vec![false; s], vec![0.0; s], u_va.norm_squared());
    for mask in 1u32..(1 << s) {
        let cols: Vec<usize> = (0..s).filter(|j| mask >> j & 1 == 1).collect();
        let sub = phi_tr.select_columns(&cols);
        let sol = ridge_oracle(&sub, u_tr, penalty);
        let mut coeffs = vec![0.0; s];
        for (i, &j) in cols.iter().enumerate() {
            coeffs[j] = sol[i];
        }
        let pred = phi_va * nalgebra::DVector::from_column_slice(&coeffs);
        let score = (pred - u_va).norm_squared() + gamma * cols.len() as f64;
        if score < best.2 {
            best = (
                (0..s).map(|j| mask >> j & 1 == 1).collect(),
                coeffs,
                score,
            );
        }
    }
    best
}

/// Deterministic standard-normal stream (Box–Muller over an LCG); keeps
/// oracle inputs independent of the library's RNG choices.
pub struct Gauss(pub u64);

impl Gauss {
    pub fn uniform(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }
    pub fn normal(&mut self) -> f64 {
        let (a, b) = (self.uniform(), self.uniform());
        (-2.0 * a.ln()).sqrt() * (2.0 * std::f64::consts::PI * b).cos()
    }
    pub fn matrix(&mut self, r: usize, c: usize) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(r, c, |_, _| self.normal())
    }
}

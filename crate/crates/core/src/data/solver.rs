//! Periodic Burgers solver: fourth-order central differences in space,
//! Dormand–Prince 5(4) with error control in time.

use super::DataError;

pub struct BurgersProblem<'a> {
    pub nu: f64,
    pub x_lower: f64,
    pub length: f64,
    /// Forcing `f(x, t)` added to the right-hand side.
    pub forcing: Option<&'a (dyn Fn(f64, f64) -> f64 + Sync)>,
}

impl BurgersProblem<'_> {
    fn rhs(&self, t: f64, u: &[f64], out: &mut [f64]) {
        let n = u.len();
        let h = self.length / n as f64;
        let (c1, c2) = (1.0 / (12.0 * h), 1.0 / (12.0 * h * h));
        for i in 0..n {
            let um2 = u[(i + n - 2) % n];
            let um1 = u[(i + n - 1) % n];
            let up1 = u[(i + 1) % n];
            let up2 = u[(i + 2) % n];
            let ux = c1 * (-up2 + 8.0 * up1 - 8.0 * um1 + um2);
            let uxx = c2 * (-up2 + 16.0 * up1 - 30.0 * u[i] + 16.0 * um1 - um2);
            out[i] = -u[i] * ux + self.nu * uxx;
            if let Some(f) = self.forcing {
                out[i] += f(self.x_lower + i as f64 * h, t);
            }
        }
    }
}

// Dormand–Prince tableau
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { rtol: 1e-10, atol: 1e-12 }
    }
}

/// Integrates from `u0` at t = `times[0]` and returns the state at every entry
/// of `times` (ascending).
pub fn integrate(problem: &BurgersProblem<'_>, u0: &[f64], times: &[f64], tol: &Tolerance) -> Result<Vec<Vec<f64>>, DataError> {
    let n = u0.len();
    let mut u = u0.to_vec();
    let mut t = times[0];
    let mut out = vec![u.clone()];
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut u5 = vec![0.0; n];
    let h_grid = problem.length / n as f64;
    let mut dt = 0.1 * h_grid * h_grid / problem.nu.max(1e-3);
    let mut steps = 0usize;
    problem.rhs(t, &u, &mut k[0]);
    for &target in &times[1..] {
        while t < target {
            let step = dt.min(target - t);
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = u[i];
                    for (j, kj) in k.iter().enumerate().take(s) {
                        acc += step * A[s][j] * kj[i];
                    }
                    stage[i] = acc;
                }
                problem.rhs(t + C[s] * step, &stage, &mut k[s]);
            }
            let mut err = 0.0f64;
            for i in 0..n {
                let mut hi = u[i];
                let mut lo = u[i];
                for s in 0..7 {
                    hi += step * B5[s] * k[s][i];
                    lo += step * B4[s] * k[s][i];
                }
                u5[i] = hi;
                let sc = tol.atol + tol.rtol * u[i].abs().max(hi.abs());
                err = err.max(((hi - lo) / sc).abs());
            }
            if !err.is_finite() || u5.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Unstable {
                    time: t,
                    message: "non-finite state; refine the grid or reduce the initial time step".into(),
                });
            }
            steps += 1;
            if steps > 50_000_000 {
                return Err(DataError::Unstable {
                    time: t,
                    message: "step count exceeded; use a finer time step or a coarser grid".into(),
                });
            }
            if err <= 1.0 {
                t += step;
                std::mem::swap(&mut u, &mut u5);
                // first-same-as-last: stage 7 is the derivative at the new state
                let last = k.pop().expect("seven stages");
                k.insert(0, last);
                if t >= target - 1e-14 * target.abs().max(1.0) {
                    t = target;
                }
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            dt = step * factor;
            if dt < 1e-14 {
                return Err(DataError::Unstable {
                    time: t,
                    message: "time step underflow; the solution is not resolved on this grid".into(),
                });
            }
        }
        out.push(u.clone());
    }
    Ok(out)
}

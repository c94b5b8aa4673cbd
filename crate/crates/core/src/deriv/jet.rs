//! Univariate truncated Taylor series.

use super::structure::MAX_ORDER;
use std::ops::{Add, Mul, Neg, Sub};

/// Truncated Taylor expansion of a scalar along one direction:
/// `coeffs[k] = f^(k)(0) / k!`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    coeffs: Vec<f64>,
}

impl Jet {
    pub fn constant(value: f64, order: usize) -> Jet {
        assert!(order >= 1 && order <= MAX_ORDER as usize, "jet order {order} out of range");
        let mut coeffs = vec![0.0; order + 1];
        coeffs[0] = value;
        Jet { coeffs }
    }

    /// The independent variable itself, seeded with unit slope.
    pub fn variable(value: f64, order: usize) -> Jet {
        let mut j = Jet::constant(value, order);
        j.coeffs[1] = 1.0;
        j
    }

    pub fn from_coeffs(coeffs: Vec<f64>) -> Jet {
        assert!(coeffs.len() >= 2 && coeffs.len() <= MAX_ORDER as usize + 1);
        Jet { coeffs }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn value(&self) -> f64 {
        self.coeffs[0]
    }

    /// `d^k f / de^k`.
    pub fn derivative(&self, k: usize) -> f64 {
        self.coeffs[k] * (1..=k).map(|i| i as f64).product::<f64>()
    }

    pub fn derivatives(&self) -> Vec<f64> {
        (0..=self.order()).map(|k| self.derivative(k)).collect()
    }

    pub fn scale(&self, s: f64) -> Jet {
        Jet {
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    pub fn offset(&self, s: f64) -> Jet {
        let mut j = self.clone();
        j.coeffs[0] += s;
        j
    }

    pub fn tanh(&self) -> Jet {
        // y' = (1 - y^2) a'
        let n = self.coeffs.len();
        let a = &self.coeffs;
        let mut y = vec![0.0; n];
        let mut z = vec![0.0; n];
        y[0] = a[0].tanh();
        z[0] = 1.0 - y[0] * y[0];
        for k in 1..n {
            y[k] = (1..=k).map(|j| j as f64 * a[j] * z[k - j]).sum::<f64>() / k as f64;
            z[k] = -(0..=k).map(|j| y[j] * y[k - j]).sum::<f64>();
        }
        Jet { coeffs: y }
    }

    pub fn sin_cos(&self) -> (Jet, Jet) {
        let n = self.coeffs.len();
        let a = &self.coeffs;
        let mut s = vec![0.0; n];
        let mut c = vec![0.0; n];
        s[0] = a[0].sin();
        c[0] = a[0].cos();
        for k in 1..n {
            let kf = k as f64;
            s[k] = (1..=k).map(|j| j as f64 * a[j] * c[k - j]).sum::<f64>() / kf;
            c[k] = -(1..=k).map(|j| j as f64 * a[j] * s[k - j]).sum::<f64>() / kf;
        }
        (Jet { coeffs: s }, Jet { coeffs: c })
    }

    pub fn sin(&self) -> Jet {
        self.sin_cos().0
    }

    pub fn cos(&self) -> Jet {
        self.sin_cos().1
    }

    pub fn exp(&self) -> Jet {
        let n = self.coeffs.len();
        let a = &self.coeffs;
        let mut e = vec![0.0; n];
        e[0] = a[0].exp();
        for k in 1..n {
            e[k] = (1..=k).map(|j| j as f64 * a[j] * e[k - j]).sum::<f64>() / k as f64;
        }
        Jet { coeffs: e }
    }

    fn check(&self, other: &Jet) {
        assert_eq!(self.order(), other.order(), "jet order mismatch");
    }
}

impl Add for &Jet {
    type Output = Jet;
    fn add(self, rhs: &Jet) -> Jet {
        self.check(rhs);
        Jet {
            coeffs: self.coeffs.iter().zip(&rhs.coeffs).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &Jet {
    type Output = Jet;
    fn sub(self, rhs: &Jet) -> Jet {
        self.check(rhs);
        Jet {
            coeffs: self.coeffs.iter().zip(&rhs.coeffs).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Mul for &Jet {
    type Output = Jet;
    fn mul(self, rhs: &Jet) -> Jet {
        self.check(rhs);
        let n = self.coeffs.len();
        let coeffs = (0..n)
            .map(|k| (0..=k).map(|j| self.coeffs[j] * rhs.coeffs[k - j]).sum())
            .collect();
        Jet { coeffs }
    }
}

impl Neg for &Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

macro_rules! by_value {
    ($tr:ident, $m:ident) => {
        impl $tr for Jet {
            type Output = Jet;
            fn $m(self, rhs: Jet) -> Jet {
                (&self).$m(&rhs)
            }
        }
    };
}
by_value!(Add, add);
by_value!(Sub, sub);
by_value!(Mul, mul);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_lift_has_no_higher_terms() {
        let c = Jet::constant(2.5, 4);
        assert_eq!(c.coeffs(), &[2.5, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(c.tanh().coeffs()[1..], [0.0; 4]);
    }

    #[test]
    fn sine_derivative_cycle() {
        let x = Jet::variable(0.0, 5);
        let d = x.sin().derivatives();
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 1.0];
        for (a, b) in d.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn tanh_matches_closed_form() {
        let x0: f64 = 0.37;
        let t = x0.tanh();
        let s = 1.0 - t * t; // sech^2
        let expected = [
            t,
            s,
            -2.0 * t * s,
            -2.0 * s * (1.0 - 3.0 * t * t),
            8.0 * t * s * (2.0 - 3.0 * t * t),
            8.0 * s * (2.0 - 15.0 * t * t + 15.0 * t.powi(4)),
        ];
        let d = Jet::variable(x0, 5).tanh().derivatives();
        for k in 0..6 {
            assert!((d[k] - expected[k]).abs() < 1e-12 * expected[k].abs().max(1.0), "k={k}");
        }
    }

    #[test]
    fn product_rule() {
        let x = Jet::variable(0.7, 3);
        let f = &x.sin() * &x.exp();
        // (sin x e^x)''' = 2 e^x (cos x - sin x)
        let x0: f64 = 0.7;
        let third = 2.0 * x0.exp() * (x0.cos() - x0.sin());
        assert!((f.derivative(3) - third).abs() < 1e-12);
    }

    #[test]
    #[should_panic]
    fn mismatched_orders_are_rejected() {
        let _ = &Jet::constant(1.0, 2) + &Jet::constant(1.0, 3);
    }
}

mod common;

use common::oracle::*;
use pdediscover::deriv::{
    evaluate, jet_propagate, loss_param_gradient, mixed_partial, DerivError, DerivRequest, PointObjective,
};
use pdediscover::network::{forward, ActivationKind, DenseLayer, FieldNet, InputScaling, MlpParams};
use pdediscover::PointSet;
use proptest::prelude::*;

fn linear_net(weights: &[f64], bias: f64) -> MlpParams {
    let mut layer = DenseLayer::zeros(weights.len(), 1, ActivationKind::Linear);
    layer.weights.copy_from_slice(weights);
    layer.bias[0] = bias;
    MlpParams {
        layers: vec![layer],
        scaling: InputScaling::identity(weights.len()),
    }
}

/// `act(w . x + b)` followed by a unit linear readout.
fn single_neuron(act: ActivationKind, w: &[f64], b: f64) -> MlpParams {
    let mut hidden = DenseLayer::zeros(w.len(), 1, act);
    hidden.weights.copy_from_slice(w);
    hidden.bias[0] = b;
    let mut out = DenseLayer::zeros(1, 1, ActivationKind::Linear);
    out.weights[0] = 1.0;
    MlpParams {
        layers: vec![hidden, out],
        scaling: InputScaling::identity(w.len()),
    }
}

fn along<'a>(net: &'a MlpParams, point: &[f64], dir: usize) -> impl Fn(f64) -> f64 + 'a {
    let point = point.to_vec();
    move |s| {
        let mut p = point.clone();
        p[dir] = s;
        forward(net, None, &p).unwrap()[0]
    }
}

#[test]
fn linear_map_has_vanishing_higher_derivatives() {
    let net = linear_net(&[2.0, 3.0], 0.0);
    let d = jet_propagate(&net, None, &[1.0, 1.0], 0, 3).unwrap();
    assert_eq!(d, vec![vec![5.0, 2.0, 0.0, 0.0]]);
}

#[test]
fn sine_cycle_through_fifth_order() {
    let net = single_neuron(ActivationKind::Sin, &[1.0, 0.0], 0.0);
    let d = jet_propagate(&net, None, &[0.0, 0.3], 0, 5).unwrap();
    let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 1.0];
    for (a, b) in d[0].iter().zip(expected) {
        assert!((a - b).abs() < 1e-14, "{:?}", d[0]);
    }
}

#[test]
fn mixed_partial_of_sine_ridge() {
    // d_xt sin(x + t) = -sin(x + t)
    let net = single_neuron(ActivationKind::Sin, &[1.0, 1.0], 0.0);
    let v = mixed_partial(&net, None, &[0.4, 0.3], &DerivRequest::new(vec![1, 1], 0)).unwrap();
    assert!((v + 0.7f64.sin()).abs() < 1e-14);
}

#[test]
fn product_field_mixed_partial_is_one() {
    // u = sin x sin t = [cos(x - t) - cos(x + t)] / 2 agrees with x t to second
    // order at the origin, where d_xt u = cos x cos t = 1.
    let mut hidden = DenseLayer::zeros(2, 2, ActivationKind::Sin);
    let half_pi = std::f64::consts::FRAC_PI_2;
    hidden.weights = vec![1.0, -1.0, 1.0, 1.0];
    hidden.bias = vec![half_pi, half_pi]; // sin(z + pi/2) = cos z
    let mut out = DenseLayer::zeros(2, 1, ActivationKind::Linear);
    out.weights = vec![0.5, -0.5];
    let net = MlpParams {
        layers: vec![hidden, out],
        scaling: InputScaling::identity(2),
    };
    let v = mixed_partial(&net, None, &[0.0, 0.0], &DerivRequest::new(vec![1, 1], 0)).unwrap();
    assert!((v - 1.0).abs() < 1e-14, "{v}");
}

#[test]
fn rejects_order_six_and_non_finite_points() {
    let net = random_mlp(1, ActivationKind::Tanh, 2, 8, 2, 1);
    assert!(matches!(
        jet_propagate(&net, None, &[0.1, 0.2], 0, 6),
        Err(DerivError::UnsupportedOrder { order: 6 })
    ));
    assert!(matches!(
        jet_propagate(&net, None, &[f64::NAN, 0.2], 0, 2),
        Err(DerivError::Domain { .. })
    ));
    assert!(matches!(
        mixed_partial(&net, None, &[0.1, 0.2], &DerivRequest::new(vec![3, 3], 0)),
        Err(DerivError::UnsupportedOrder { order: 6 })
    ));
}

#[test]
fn tanh_net_third_order_matches_five_point_stencil() {
    // Classical stencil (f(x+2h) - 2f(x+h) + 2f(x-h) - f(x-2h)) / (2h^3) with
    // h = 1e-3. Its own truncation error h^2/4 f^(5) is ~1e-6 relative for
    // unit-scale nets, so the discrepancy is checked against that bound plus
    // rounding; the 1e-6 comparison uses higher-order stencils below.
    for seed in 0..10 {
        let net = random_mlp(seed, ActivationKind::Tanh, 2, 10, 2, 1);
        let p = [0.3, -0.2];
        let f = along(&net, &p, 0);
        let h = 1e-3;
        let x = p[0];
        let fd = (f(x + 2.0 * h) - 2.0 * f(x + h) + 2.0 * f(x - h) - f(x - 2.0 * h)) / (2.0 * h.powi(3));
        let d = jet_propagate(&net, None, &p, 0, 3).unwrap()[0][3];
        let f5 = fd_derivative(&f, x, 5);
        let bound = h * h / 4.0 * f5.abs() * 1.05 + 6.0 * f64::EPSILON * f(x).abs().max(1.0) / (2.0 * h.powi(3));
        assert!((d - fd).abs() <= bound, "seed {seed}: {d} vs {fd}, bound {bound:e}");
        let refined = fd_derivative(&f, x, 3);
        assert!(rel_err(d, refined, 1e-3) < 1e-6, "seed {seed}: {d} vs {refined}");
    }
}

#[test]
fn pure_derivatives_match_high_order_stencils() {
    for seed in 0..50u64 {
        let act = if seed % 2 == 0 { ActivationKind::Tanh } else { ActivationKind::Sin };
        let net = random_mlp(seed, act, 2, 12, 2, 1);
        let p = [0.37 - 0.01 * seed as f64, -0.21 + 0.013 * seed as f64];
        for dir in 0..2 {
            let d = jet_propagate(&net, None, &p, dir, 5).unwrap();
            let f = along(&net, &p, dir);
            for k in 1..=5usize {
                let fd = fd_derivative(&f, p[dir], k);
                let tol = if k <= 3 { 1e-6 } else { 1e-4 };
                let scale = d[0].iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let e = rel_err(d[0][k], fd, 1e-3 * scale);
                assert!(e < tol, "seed {seed} dir {dir} k {k}: {} vs {fd} (rel {e:e})", d[0][k]);
            }
        }
    }
}

#[test]
fn mixed_partial_matches_nested_differences() {
    for seed in 0..10 {
        let net = random_mlp(100 + seed, ActivationKind::Tanh, 2, 10, 3, 1);
        let p = [0.2, -0.1, 0.4];
        let exact = mixed_partial(&net, None, &p, &DerivRequest::new(vec![2, 1, 0], 0)).unwrap();
        let inner = |x: f64| {
            let g = |y: f64| forward(&net, None, &[x, y, p[2]]).unwrap()[0];
            fd_derivative(&g, p[1], 1)
        };
        let nested = fd_derivative(&inner, p[0], 2);
        assert!(rel_err(exact, nested, 1e-3) < 1e-5, "seed {seed}: {exact} vs {nested}");
    }
}

#[test]
fn physical_units_follow_input_scaling() {
    let mut net = random_mlp(7, ActivationKind::Tanh, 2, 8, 2, 1);
    net.scaling = InputScaling::from_bounds(&[(-8.0, 8.0), (0.0, 10.0)]);
    let p = [1.5, 3.0];
    let d = jet_propagate(&net, None, &p, 0, 3).unwrap();
    let f = along(&net, &p, 0);
    for k in 1..=3 {
        // step scaled to the physical domain width
        let fd = central_fd(&f, p[0], k, 8.0 * fd_settings(k).0, fd_settings(k).1);
        assert!(rel_err(d[0][k], fd, 1e-6) < 1e-6, "k {k}");
    }
}

#[test]
fn single_neuron_matches_closed_forms() {
    let w = [0.8, -0.4];
    let b = 0.3;
    let x = [0.25, 0.5];
    let z = w[0] * x[0] + w[1] * x[1] + b;
    for act in [ActivationKind::Tanh, ActivationKind::Sin, ActivationKind::Linear] {
        let net = single_neuron(act, &w, b);
        for dir in 0..2 {
            let d = jet_propagate(&net, None, &x, dir, 5).unwrap();
            for k in 0..=5usize {
                let g = match act {
                    ActivationKind::Tanh => eval_poly(&tanh_derivative_poly(k), z.tanh()),
                    ActivationKind::Sin => match k % 4 {
                        0 => z.sin(),
                        1 => z.cos(),
                        2 => -z.sin(),
                        _ => -z.cos(),
                    },
                    ActivationKind::Linear => match k {
                        0 => z,
                        1 => 1.0,
                        _ => 0.0,
                    },
                };
                let expected = w[dir].powi(k as i32) * g;
                let e = rel_err(d[0][k], expected, 1e-12);
                assert!(e < 1e-10, "{act:?} dir {dir} k {k}: {} vs {expected}", d[0][k]);
            }
        }
    }
}

/// Block-diagonal stacking of two equally deep nets with readout `a*u1 + b*u2`.
fn combine(n1: &MlpParams, n2: &MlpParams, a: f64, b: f64) -> MlpParams {
    let depth = n1.layers.len();
    let mut layers = Vec::new();
    for li in 0..depth {
        let (l1, l2) = (&n1.layers[li], &n2.layers[li]);
        let last = li + 1 == depth;
        let n_in = if li == 0 { l1.n_in } else { l1.n_in + l2.n_in };
        let n_out = if last { l1.n_out } else { l1.n_out + l2.n_out };
        let mut l = DenseLayer::zeros(n_in, n_out, l1.activation);
        if last {
            for r in 0..n_out {
                for c in 0..l1.n_in {
                    l.weights[r * n_in + c] = a * l1.weights[r * l1.n_in + c];
                }
                for c in 0..l2.n_in {
                    l.weights[r * n_in + l1.n_in + c] = b * l2.weights[r * l2.n_in + c];
                }
                l.bias[r] = a * l1.bias[r] + b * l2.bias[r];
            }
        } else {
            for r in 0..l1.n_out {
                for c in 0..l1.n_in {
                    l.weights[r * n_in + c] = l1.weights[r * l1.n_in + c];
                }
                l.bias[r] = l1.bias[r];
            }
            let off_c = if li == 0 { 0 } else { l1.n_in };
            for r in 0..l2.n_out {
                for c in 0..l2.n_in {
                    l.weights[(l1.n_out + r) * n_in + off_c + c] = l2.weights[r * l2.n_in + c];
                }
                l.bias[l1.n_out + r] = l2.bias[r];
            }
        }
        layers.push(l);
    }
    MlpParams {
        layers,
        scaling: n1.scaling.clone(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn schwarz_symmetry(seed in 0u64..1000, x in -1.0f64..1.0, y in -1.0f64..1.0, t in -1.0f64..1.0) {
        let net = random_mlp(seed, ActivationKind::Tanh, 2, 8, 3, 1);
        let p = [x, y, t];
        // Requests are multi-indices, so differentiation order cannot leak in
        // directly; permuting the input coordinates of the net exercises the
        // engine along a different path for the same partial.
        let a = mixed_partial(&net, None, &p, &DerivRequest::new(vec![1, 0, 1], 0)).unwrap();
        let mut swapped = net.clone();
        for r in 0..swapped.layers[0].n_out {
            swapped.layers[0].weights.swap(r * 3, r * 3 + 2);
        }
        let b = mixed_partial(&swapped, None, &[t, y, x], &DerivRequest::new(vec![1, 0, 1], 0)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        let c = mixed_partial(&net, None, &p, &DerivRequest::new(vec![2, 1, 0], 0)).unwrap();
        let d = mixed_partial(&swapped, None, &[t, y, x], &DerivRequest::new(vec![0, 1, 2], 0)).unwrap();
        prop_assert!((c - d).abs() <= 1e-12 * c.abs().max(1.0));
    }

    #[test]
    fn linearity_of_derivatives(s1 in 0u64..500, s2 in 500u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0,
                                x in -1.0f64..1.0, t in -1.0f64..1.0) {
        let n1 = random_mlp(s1, ActivationKind::Tanh, 2, 6, 2, 1);
        let n2 = random_mlp(s2, ActivationKind::Tanh, 2, 6, 2, 1);
        let sum = combine(&n1, &n2, a, b);
        let reqs: Vec<DerivRequest> = [[0, 0], [1, 0], [0, 1], [3, 0], [2, 2], [5, 0], [1, 4]]
            .iter()
            .map(|m| DerivRequest::new(m.to_vec(), 0))
            .collect();
        let pts = PointSet::new(2, vec![x, t]);
        let d1 = evaluate(&n1, None, &pts, &reqs).unwrap();
        let d2 = evaluate(&n2, None, &pts, &reqs).unwrap();
        let ds = evaluate(&sum, None, &pts, &reqs).unwrap();
        for r in 0..reqs.len() {
            let lin = a * d1[r] + b * d2[r];
            prop_assert!((ds[r] - lin).abs() <= 1e-12 * lin.abs().max(1.0), "{r}: {} vs {lin}", ds[r]);
        }
    }
}

/// `sum_p sum_r w_r (d_r u)^2` for a list of derivative requests.
struct SquaredDerivs {
    requests: Vec<DerivRequest>,
    weights: Vec<f64>,
}

impl PointObjective for SquaredDerivs {
    fn requests(&self) -> &[DerivRequest] {
        &self.requests
    }
    fn eval(&self, _p: usize, _c: &[f64], values: &[f64], grad: &mut [f64], _aux: &mut [f64]) -> f64 {
        let mut l = 0.0;
        for r in 0..values.len() {
            l += self.weights[r] * values[r] * values[r];
            grad[r] = 2.0 * self.weights[r] * values[r];
        }
        l
    }
}

/// Residual-like loss `(u_t + u u_x - 0.1 u_xx + 0.01 u_xxxx)^2`.
struct Residual;

impl PointObjective for Residual {
    fn requests(&self) -> &[DerivRequest] {
        static R: std::sync::OnceLock<Vec<DerivRequest>> = std::sync::OnceLock::new();
        R.get_or_init(|| {
            [[0, 0], [0, 1], [1, 0], [2, 0], [4, 0]]
                .iter()
                .map(|m| DerivRequest::new(m.to_vec(), 0))
                .collect()
        })
    }
    fn eval(&self, _p: usize, _c: &[f64], v: &[f64], g: &mut [f64], _aux: &mut [f64]) -> f64 {
        let r = v[1] + v[0] * v[2] - 0.1 * v[3] + 0.01 * v[4];
        g[0] = 2.0 * r * v[2];
        g[1] = 2.0 * r;
        g[2] = 2.0 * r * v[0];
        g[3] = -0.2 * r;
        g[4] = 0.02 * r;
        r * r
    }
}

fn loss_of<O: PointObjective>(net: &MlpParams, pts: &PointSet, obj: &O) -> f64 {
    loss_param_gradient(net, None, pts, obj).unwrap().value
}

fn check_param_gradient<O: PointObjective>(net: &MlpParams, pts: &PointSet, obj: &O, picks: usize, seed: u64) {
    let g = loss_param_gradient(net, None, pts, obj).unwrap().gradient.values;
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let theta = net.params();
    let mut state = seed;
    for _ in 0..picks {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let i = (state >> 33) as usize % theta.len();
        let h = 1e-5;
        let mut plus = net.clone();
        let mut th = theta.clone();
        th[i] += h;
        plus.set_params(&th).unwrap();
        let mut minus = net.clone();
        th[i] -= 2.0 * h;
        minus.set_params(&th).unwrap();
        let fd = (loss_of(&plus, pts, obj) - loss_of(&minus, pts, obj)) / (2.0 * h);
        let e = rel_err(g[i], fd, 1e-4 * gmax);
        assert!(e < 1e-5, "param {i}: {} vs {fd} (rel {e:e})", g[i]);
    }
}

fn sample_points(n: usize, dim: usize, seed: u64) -> PointSet {
    let mut state = seed;
    let coords = (0..n * dim)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    PointSet::new(dim, coords)
}

#[test]
fn gradient_of_squared_first_derivative() {
    let net = random_mlp(11, ActivationKind::Tanh, 2, 10, 2, 1);
    let pts = PointSet::new(2, vec![0.3, -0.4]);
    let obj = SquaredDerivs {
        requests: vec![DerivRequest::new(vec![1, 0], 0)],
        weights: vec![1.0],
    };
    check_param_gradient(&net, &pts, &obj, 20, 5);
}

#[test]
fn gradient_through_fourth_and_fifth_order_terms() {
    for (seed, act) in [(21, ActivationKind::Tanh), (22, ActivationKind::Sin)] {
        let net = random_mlp(seed, act, 3, 8, 2, 1);
        let pts = sample_points(300, 2, seed);
        check_param_gradient(&net, &pts, &Residual, 30, seed);
        let obj = SquaredDerivs {
            requests: vec![
                DerivRequest::new(vec![5, 0], 0),
                DerivRequest::new(vec![2, 2], 0),
                DerivRequest::new(vec![0, 3], 0),
            ],
            weights: vec![0.01, 0.1, 1.0],
        };
        check_param_gradient(&net, &pts, &obj, 30, seed + 1);
    }
}

#[test]
fn gradient_for_multi_output_net() {
    let net = random_mlp(31, ActivationKind::Tanh, 2, 8, 3, 2);
    let pts = sample_points(40, 3, 3);
    let obj = SquaredDerivs {
        requests: vec![
            DerivRequest::new(vec![2, 0, 0], 0),
            DerivRequest::new(vec![1, 1, 0], 1),
            DerivRequest::new(vec![0, 0, 1], 1),
        ],
        weights: vec![1.0, 0.5, 2.0],
    };
    check_param_gradient(&net, &pts, &obj, 25, 9);
}

#[test]
fn dead_network_gradient_only_reaches_output_bias() {
    let mut net = random_mlp(3, ActivationKind::Tanh, 2, 5, 2, 1);
    let zeros = vec![0.0; net.param_count()];
    net.set_params(&zeros).unwrap();
    net.layers.last_mut().unwrap().bias[0] = 0.7;
    let obj = SquaredDerivs {
        requests: vec![DerivRequest::value(2, 0)],
        weights: vec![1.0],
    };
    let g = loss_param_gradient(&net, None, &PointSet::new(2, vec![0.2, 0.1]), &obj)
        .unwrap()
        .gradient
        .values;
    let last = g.len() - 1;
    assert!((g[last] - 1.4).abs() < 1e-15);
    assert!(g[..last].iter().all(|&v| v == 0.0));
}

struct Constant;

impl PointObjective for Constant {
    fn requests(&self) -> &[DerivRequest] {
        &[]
    }
    fn eval(&self, _p: usize, _c: &[f64], _v: &[f64], _g: &mut [f64], _a: &mut [f64]) -> f64 {
        3.0
    }
}

#[test]
fn constant_loss_has_zero_gradient() {
    let net = random_mlp(4, ActivationKind::Sin, 2, 6, 2, 1);
    let out = loss_param_gradient(&net, None, &sample_points(10, 2, 1), &Constant).unwrap();
    assert_eq!(out.value, 30.0);
    assert!(out.gradient.values.iter().all(|&v| v == 0.0));
}

struct Blowup;

impl PointObjective for Blowup {
    fn requests(&self) -> &[DerivRequest] {
        static R: std::sync::OnceLock<Vec<DerivRequest>> = std::sync::OnceLock::new();
        R.get_or_init(|| vec![DerivRequest::value(2, 0)])
    }
    fn eval(&self, p: usize, _c: &[f64], _v: &[f64], _g: &mut [f64], _a: &mut [f64]) -> f64 {
        if p == 3 {
            f64::INFINITY
        } else {
            0.0
        }
    }
}

#[test]
fn non_finite_loss_reports_point_and_component() {
    let net = random_mlp(4, ActivationKind::Tanh, 2, 6, 2, 1);
    let err = loss_param_gradient(&net, None, &sample_points(10, 2, 1), &Blowup).unwrap_err();
    assert!(matches!(err, DerivError::NonFiniteLoss { point: 3, component: Some(0) }), "{err}");
}

#[test]
fn batching_does_not_change_results_beyond_rounding() {
    let net = random_mlp(8, ActivationKind::Tanh, 2, 8, 2, 1);
    let pts = sample_points(700, 2, 2);
    let whole = loss_param_gradient(&net, None, &pts, &Residual).unwrap();
    let mut sum = vec![0.0; net.param_count()];
    for i in 0..pts.len() {
        let one = loss_param_gradient(&net, None, &pts.subset(&[i]), &Residual).unwrap();
        sum.iter_mut().zip(&one.gradient.values).for_each(|(s, g)| *s += g);
    }
    for (a, b) in whole.gradient.values.iter().zip(&sum) {
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }
    let again = loss_param_gradient(&net, None, &pts, &Residual).unwrap();
    assert_eq!(whole.gradient.values, again.gradient.values);
}

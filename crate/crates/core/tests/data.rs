use pdediscover::data::{
    add_noise, generate, lhs_points, read_dataset, sobol_points, solve_burgers, subsample_sensors, write_dataset,
    DataError, GeneratorSpec, InitialCondition, Mode, Model,
};
use pdediscover::library::{AnalyticField, FieldSource};
use pdediscover::deriv::DerivRequest;
use pdediscover::PointSet;
use proptest::prelude::*;
use std::f64::consts::PI;

fn spec(model: Model) -> GeneratorSpec {
    GeneratorSpec {
        model,
        ..GeneratorSpec::burgers(0.1)
    }
}

#[test]
fn diffusion_closed_form() {
    let mut s = spec(Model::DiffusionAnalytic);
    s.nu = 0.1;
    s.modes = vec![Mode { k: 1.0, amplitude: 1.0 }];
    let f = s.analytic_field().unwrap();
    assert!((f.value(&[PI / 2.0, 0.0], 0) - 1.0).abs() < 1e-15);
    assert!((f.value(&[PI / 2.0, 2.0], 0) - (-0.2f64).exp()).abs() < 1e-15);
}

#[test]
fn zero_initial_condition_stays_zero() {
    let mut s = GeneratorSpec::burgers(0.1);
    s.initial = InitialCondition::Zero;
    s.nx = 64;
    s.nt = 11;
    let d = generate(&s).unwrap();
    assert!(d.values.iter().all(|&v| v == 0.0));
}

#[test]
fn full_grid_layout() {
    let mut s = GeneratorSpec::burgers(0.1);
    s.nx = 64;
    s.nt = 11;
    s.t_range = (0.0, 1.0);
    let d = generate(&s).unwrap();
    assert_eq!(d.len(), 64 * 11);
    let g = d.meta.grid.unwrap();
    assert_eq!((g.spatial, g.times), (64, 11));
    // row = s * T + j
    assert_eq!(d.points.row(3 * 11 + 4), &[-8.0 + 3.0 * 0.25, 0.4][..]);
    // first time slice is the Gaussian initial condition
    let u0 = d.value_row(32 * 11)[0];
    assert!((u0 - 1.0).abs() < 1e-15);
}

/// Differences between successive resolutions at the coarse grid points.
fn self_convergence(levels: &[usize], t_end: f64) -> Vec<f64> {
    let s = GeneratorSpec::burgers(0.1);
    let sols: Vec<Vec<f64>> = levels
        .iter()
        .map(|&n| solve_burgers(&s, n, &[0.0, t_end]).unwrap().pop().unwrap())
        .collect();
    let coarse = levels[0];
    sols.windows(2)
        .zip(levels.windows(2))
        .map(|(w, l)| {
            let (ra, rb) = (l[0] / coarse, l[1] / coarse);
            (0..coarse)
                .map(|i| (w[0][i * ra] - w[1][i * rb]).abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

#[test]
fn burgers_fourth_order_self_convergence() {
    let diffs = self_convergence(&[64, 128, 256, 512, 1024], 1.0);
    for w in diffs.windows(2) {
        let factor = w[0] / w[1];
        assert!(factor >= 8.0, "factor {factor:.2} from {diffs:?}");
    }
}

#[test]
fn forced_burgers_runs() {
    let mut s = GeneratorSpec::burgers(0.1);
    s.model = Model::BurgersSourceFd;
    s.initial = InitialCondition::Zero;
    s.x_range = (-2.0 * PI, 2.0 * PI);
    s.nx = 64;
    s.nt = 6;
    s.t_range = (0.0, 0.01);
    let d = generate(&s).unwrap();
    // u ≈ sin(x) (1 - cos t) for small t
    for i in 0..64 {
        let x = d.points.row(i * 6 + 5)[0];
        let expect = x.sin() * (1.0 - 0.01f64.cos());
        assert!((d.value_row(i * 6 + 5)[0] - expect).abs() < 1e-7);
    }
}

#[test]
fn burgers_output_satisfies_pde() {
    // Residual under 6th-order differences of the fine solution, evaluated
    // at interior time t = 0.5 by central differences in time.
    let s = GeneratorSpec::burgers(0.1);
    let n = 512;
    let dt = 1e-3;
    let sol = solve_burgers(&s, n, &[0.5 - dt, 0.5, 0.5 + dt]).unwrap();
    let h = 16.0 / n as f64;
    let u = &sol[1];
    let at = |i: isize| u[((i + n as isize) % n as isize) as usize];
    let mut worst: f64 = 0.0;
    for i in 0..n as isize {
        let ux = (at(i + 3) - 9.0 * at(i + 2) + 45.0 * at(i + 1) - 45.0 * at(i - 1) + 9.0 * at(i - 2) - at(i - 3)) / (60.0 * h);
        let uxx = (2.0 * at(i + 3) - 27.0 * at(i + 2) + 270.0 * at(i + 1) - 490.0 * at(i) + 270.0 * at(i - 1)
            - 27.0 * at(i - 2)
            + 2.0 * at(i - 3))
            / (180.0 * h * h);
        let ut = (sol[2][i as usize] - sol[0][i as usize]) / (2.0 * dt);
        worst = worst.max((ut + at(i) * ux - 0.1 * uxx).abs());
    }
    assert!(worst < 1e-5, "residual {worst:e}");
}

#[test]
fn analytic_fields_satisfy_their_pdes() {
    let diff = AnalyticField::diffusion_modes(0.1, &[(1.0, 1.0), (2.0, 0.5)]);
    let adv = AnalyticField::advection(1.5);
    let mut pts = PointSet::empty(2);
    for i in 0..50 {
        pts.push(&[-8.0 + 0.31 * i as f64, 0.2 * i as f64]);
    }
    let req = [
        DerivRequest::new(vec![0, 1], 0),
        DerivRequest::new(vec![1, 0], 0),
        DerivRequest::new(vec![2, 0], 0),
    ];
    let d = diff.derivatives(&pts, &req).unwrap();
    let a = adv.derivatives(&pts, &req).unwrap();
    for r in 0..pts.len() {
        assert!((d[3 * r] - 0.1 * d[3 * r + 2]).abs() < 1e-10);
        assert!((a[3 * r] + 1.5 * a[3 * r + 1]).abs() < 1e-10);
    }
}

#[test]
fn noise_level_zero_is_identity() {
    let mut s = GeneratorSpec::burgers(0.1);
    s.model = Model::AdvectionAnalytic;
    let d = generate(&s).unwrap();
    let n = add_noise(&d, 0.0, 9);
    assert_eq!(n.values, d.values);
    assert_eq!(n.points, d.points);
}

#[test]
fn noise_ratio_calibrated() {
    let mut s = GeneratorSpec::burgers(0.1);
    s.model = Model::AdvectionAnalytic;
    s.nx = 1000;
    s.nt = 100;
    let d = generate(&s).unwrap();
    assert_eq!(d.len(), 100_000);
    let n = add_noise(&d, 0.1, 42);
    let rms = |v: &mut dyn Iterator<Item = f64>| {
        let (s, c) = v.fold((0.0, 0usize), |(s, c), x| (s + x * x, c + 1));
        (s / c as f64).sqrt()
    };
    let ratio = rms(&mut n.values.iter().zip(&d.values).map(|(a, b)| a - b)) / rms(&mut d.values.iter().copied());
    assert!((0.098..=0.102).contains(&ratio), "ratio {ratio}");
    assert_eq!(add_noise(&d, 0.1, 42).values, n.values);
    assert_eq!(n.meta.noise_level, 0.1);
    assert_eq!(n.meta.seed, Some(42));
    assert_eq!(n.meta.generator, d.meta.generator);
}

#[test]
fn sensor_subsampling() {
    let mut s = GeneratorSpec::burgers(0.1);
    s.model = Model::AdvectionAnalytic;
    let d = generate(&s).unwrap();
    assert_eq!(d.len(), 25_856);
    let m = subsample_sensors(&d, 5, 101, 7).unwrap();
    assert_eq!(m.len(), 505);
    assert!((100.0 * m.len() as f64 / d.len() as f64 - 1.95).abs() < 0.01);
    let xs: std::collections::BTreeSet<u64> = m.points.rows().map(|r| r[0].to_bits()).collect();
    assert_eq!(xs.len(), 5);
    assert_eq!(subsample_sensors(&d, 5, 101, 7).unwrap(), m);
    let thin = subsample_sensors(&d, 3, 11, 7).unwrap();
    assert_eq!(thin.len(), 33);
    assert_eq!(thin.points.row(10)[1], 10.0);
    let all = subsample_sensors(&d, 256, 101, 1).unwrap();
    assert_eq!((&all.points, &all.values, all.meta.grid), (&d.points, &d.values, d.meta.grid));
    assert!(matches!(subsample_sensors(&d, 257, 101, 1), Err(DataError::Oversubscribed { .. })));
    assert!(matches!(subsample_sensors(&d, 5, 102, 1), Err(DataError::Oversubscribed { .. })));
}

#[test]
fn sobol_prefix_1d() {
    let c = sobol_points(4, &[(0.0, 1.0)], 1);
    assert_eq!(c.points.coords(), &[0.5, 0.75, 0.25, 0.375]);
    let c = sobol_points(3, &[(-8.0, 8.0)], 0);
    assert_eq!(c.points.coords(), &[-8.0, 0.0, 4.0]);
}

/// Largest deviation of anchored-box counts from their volumes over a grid of
/// box corners.
fn discrepancy_proxy(p: &PointSet) -> f64 {
    let n = p.len() as f64;
    let mut worst: f64 = 0.0;
    for a in 1..=32 {
        for b in 1..=32 {
            let (u, v) = (a as f64 / 32.0, b as f64 / 32.0);
            let count = p.rows().filter(|r| r[0] < u && r[1] < v).count() as f64;
            worst = worst.max((count / n - u * v).abs());
        }
    }
    worst
}

#[test]
fn sobol_beats_random() {
    use rand::{Rng, SeedableRng};
    let sob = sobol_points(1024, &[(0.0, 1.0), (0.0, 1.0)], 1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let coords: Vec<f64> = (0..2048).map(|_| rng.gen::<f64>()).collect();
    let rnd = PointSet::new(2, coords);
    let (ds, dr) = (discrepancy_proxy(&sob.points), discrepancy_proxy(&rnd));
    assert!(ds < dr, "sobol {ds} random {dr}");
}

fn assert_stratified(points: &PointSet, bounds: &[(f64, f64)]) {
    let n = points.len();
    for (d, &(lo, hi)) in bounds.iter().enumerate() {
        let mut seen = vec![false; n];
        for r in points.rows() {
            let bin = (((r[d] - lo) / (hi - lo)) * n as f64).floor() as usize;
            assert!(bin < n && !seen[bin], "axis {d} bin {bin}");
            seen[bin] = true;
        }
    }
}

#[test]
fn lhs_strata() {
    let c = lhs_points(4, &[(0.0, 1.0)], 5);
    assert_stratified(&c.points, &[(0.0, 1.0)]);
    let b = [(-8.0, 8.0), (0.0, 10.0)];
    let c = lhs_points(100, &b, 11);
    assert_stratified(&c.points, &b);
    assert_eq!(lhs_points(100, &b, 11).points, c.points);
    assert_ne!(lhs_points(100, &b, 12).points, c.points);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn samplers_stay_in_bounds(n in 1usize..300, dims in 1usize..=3, seed in any::<u64>(), skip in 0usize..5,
                               lo in -10.0f64..0.0, w in 0.1f64..20.0) {
        let bounds: Vec<(f64, f64)> = (0..dims).map(|d| (lo + d as f64, lo + d as f64 + w)).collect();
        for set in [sobol_points(n, &bounds, skip), lhs_points(n, &bounds, seed)] {
            prop_assert_eq!(set.points.len(), n);
            for r in set.points.rows() {
                for (v, &(a, b)) in r.iter().zip(&bounds) {
                    prop_assert!(*v >= a && *v <= b);
                }
            }
        }
        assert_stratified(&lhs_points(n, &bounds, seed).points, &bounds);
    }

    #[test]
    fn noise_preserves_everything_but_values(level in 0.0f64..1.0, seed in any::<u64>()) {
        let mut s = GeneratorSpec::burgers(0.1);
        s.model = Model::AdvectionAnalytic;
        s.nx = 16;
        s.nt = 4;
        let d = generate(&s).unwrap();
        let n = add_noise(&d, level, seed);
        prop_assert_eq!(&n.points, &d.points);
        prop_assert_eq!(n.values.len(), d.values.len());
        let mut m = n.meta.clone();
        m.noise_level = 0.0;
        m.seed = None;
        prop_assert_eq!(m, d.meta);
    }
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let mut s = GeneratorSpec::burgers(0.1);
    s.model = Model::DiffusionAnalytic;
    s.nx = 32;
    s.nt = 7;
    let d = add_noise(&generate(&s).unwrap(), 0.1, 1);
    write_dataset(&d, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, d);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("x,t,u\n"));
}

#[test]
fn csv_without_sidecar_infers_meta() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    std::fs::write(&path, "x,y,t,u,v\n0,1,2,3,4\n-1,0.5,3,0,0\n").unwrap();
    let d = read_dataset(&path).unwrap();
    assert_eq!(d.meta.coords, ["x", "y", "t"]);
    assert_eq!(d.meta.fields, ["u", "v"]);
    assert_eq!(d.meta.domain, vec![[-1.0, 0.0], [0.5, 1.0], [2.0, 3.0]]);
    assert_eq!(d.value_row(0), &[3.0, 4.0]);
}

#[test]
fn csv_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    std::fs::write(&path, "x,t,u\n").unwrap();
    assert!(matches!(read_dataset(&path), Err(DataError::Empty)));

    let mut text = String::from("x,t,u\n");
    for i in 0..5 {
        text += &format!("{i},0,1\n");
    }
    text += "5,0,abc\n7,0,1\n";
    std::fs::write(&path, &text).unwrap();
    match read_dataset(&path) {
        Err(DataError::Parse { line, message }) => {
            assert_eq!(line, 7);
            assert!(message.contains("abc"));
        }
        other => panic!("{other:?}"),
    }

    std::fs::write(&path, "x,y,u\n1,2,3\n").unwrap();
    assert!(matches!(read_dataset(&path), Err(DataError::Schema(_))));
    std::fs::write(&path, "x,t\n1,2\n").unwrap();
    assert!(matches!(read_dataset(&path), Err(DataError::Schema(_))));
    std::fs::write(&path, "x,t,u\n1,2\n").unwrap();
    assert!(matches!(read_dataset(&path), Err(DataError::Parse { line: 2, .. })));
    assert!(matches!(read_dataset(&dir.path().join("missing.csv")), Err(DataError::Io { .. })));
}

#[test]
fn invalid_specs_rejected() {
    let mut s = GeneratorSpec::burgers(0.1);
    s.nx = 32;
    assert!(matches!(generate(&s), Err(DataError::Invalid(_))));
    let mut s = GeneratorSpec::burgers(0.1);
    s.oversample = 2;
    assert!(matches!(generate(&s), Err(DataError::Invalid(_))));
    let mut s = GeneratorSpec::burgers(-0.1);
    s.nx = 64;
    assert!(generate(&s).is_err());
}

#[test]
fn inviscid_blowup_reports_instability() {
    let mut s = GeneratorSpec::burgers(0.0);
    s.nx = 64;
    s.nt = 3;
    s.initial = InitialCondition::Sine { periods: 1, amplitude: 5.0 };
    s.t_range = (0.0, 20.0);
    assert!(matches!(generate(&s), Err(DataError::Unstable { .. })));
}

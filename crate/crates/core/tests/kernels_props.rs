use proptest::prelude::*;

use nonauto::forms::{davies_perturb, DaviesWeight, OperatorPath};
use nonauto::hilbert::{operator_norm, NormIndex};
use nonauto::kernels::{
    davies_sweep, gn_ultracontractivity_bound, kernel_matrix, nash_ultracontractivity_bound, DaviesSweepConfig,
};
use nonauto::models::{build_dynamic_graph, build_elliptic_1d, Boundary, Elliptic1DModel, GraphEdge, GraphModel, Schedule};
use nonauto::propagator::{assemble, propagate_to_tolerance_aligned, Partition};
use nonauto::properties::grid;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nash_bound_decreases_while_power_law_dominates(
        alpha in 0.1f64..2.0, c in 0.1f64..5.0, mu in 0.5f64..4.0, omega in 0.0f64..3.0, u in 0.01f64..0.99,
    ) {
        // d/d(dt) log bound = -mu / (2 dt) + omega < 0 for dt < mu / (2 omega)
        let dt_star = if omega > 0.0 { mu / (2.0 * omega) } else { 10.0 };
        let (a, b) = (u * dt_star, (u + 0.5 * (1.0 - u)) * dt_star);
        let fa = nash_ultracontractivity_bound(alpha, c, mu, omega, 0.0, a).unwrap();
        let fb = nash_ultracontractivity_bound(alpha, c, mu, omega, 0.0, b).unwrap();
        prop_assert!(fb < fa);
    }

    #[test]
    fn gn_bound_decreases_while_power_law_dominates(
        alpha in 0.1f64..2.0, c in 0.1f64..5.0, n in 1.0f64..8.0, a2 in 0.0f64..1.0, w in 0.0f64..2.0, u in 0.01f64..0.99,
    ) {
        let bar = nonauto::kernels::gn_omega_bar(n, 0.0, a2, 0.0, a2, w);
        let power = n * n / (2.0 * (n + 2.0));
        let dt_star = if bar > 0.0 { power / bar } else { 10.0 };
        let (x, y) = (u * dt_star, (u + 0.5 * (1.0 - u)) * dt_star);
        let fx = gn_ultracontractivity_bound(alpha, c, n, 0.0, a2, 0.0, a2, w, x).unwrap().value;
        let fy = gn_ultracontractivity_bound(alpha, c, n, 0.0, a2, 0.0, a2, w, y).unwrap().value;
        prop_assert!(fy < fx);
    }
}

#[test]
fn sweep_at_zero_rho_reproduces_the_unperturbed_norm() {
    let model = GraphModel::truncated_lattice(6, Schedule::Piecewise { breaks: vec![0.4], values: vec![1.0, 2.5] }, 1.0);
    let path = build_dynamic_graph(&model).unwrap().path;
    let coords = path.space().coords().unwrap().to_vec();
    let family = DaviesWeight::standard_line_family(&coords, &[0.0], 3.0).unwrap();
    let dts = [0.125, 0.25, 0.5, 1.0];
    let cfg = DaviesSweepConfig {
        rho_grid: vec![-1.0, 0.0, 1.0],
        dt_grid: dts.to_vec(),
        beta: 1.0,
        tolerance: 1e-10,
        alpha: None,
        form_samples: 8,
    };
    let fit = davies_sweep(&path, &family, &cfg).unwrap();
    // piecewise-constant path: every aligned partition gives the same family
    let same = davies_perturb(&path, &family[0], 0.0).unwrap();
    let prop = assemble(&same, &Partition::aligned(&same, 0.0, 1.0).unwrap()).unwrap();
    let zero: Vec<_> = fit.samples.iter().filter(|x| x.rho == 0.0).collect();
    assert!(!zero.is_empty());
    for x in zero {
        let u = prop.evaluate(x.s + x.dt, x.s).unwrap();
        let direct = operator_norm(path.space(), &u, NormIndex::One, NormIndex::Inf).unwrap();
        assert!((x.norm_1_inf - direct).abs() <= 1e-12 * direct, "{} vs {direct}", x.norm_1_inf);
    }
}

#[test]
fn time_reversible_hermitian_family_has_symmetric_kernel() {
    // m(t) = m(T - t) on a weighted graph with symmetric generator
    let horizon = 2.0;
    let model = GraphModel {
        nodes: 5,
        edges: vec![
            GraphEdge { initial: 0, terminal: 1, schedule: 0 },
            GraphEdge { initial: 1, terminal: 2, schedule: 1 },
            GraphEdge { initial: 2, terminal: 3, schedule: 0 },
            GraphEdge { initial: 3, terminal: 4, schedule: 1 },
            GraphEdge { initial: 4, terminal: 0, schedule: 2 },
        ],
        schedules: vec![
            Schedule::Sinusoid { mean: 1.0, amplitude: 0.5, period: horizon, phase: std::f64::consts::FRAC_PI_2 },
            Schedule::Piecewise { breaks: vec![0.5, 1.5], values: vec![0.3, 2.0, 0.3] },
            Schedule::constant(0.7),
        ],
        dirichlet_nodes: vec![],
        max_degree: None,
        coords: None,
        horizon,
    };
    let path: OperatorPath = build_dynamic_graph(&model).unwrap().path;
    for t in [0.1, 0.6, 1.3] {
        assert!((path.evaluate(t) - path.evaluate(horizon - t)).amax() < 1e-12);
    }
    let nodes = grid(0.0, horizon, 9);
    let prop = propagate_to_tolerance_aligned(&path, 0.0, horizon, 1e-8, &nodes).unwrap();
    for (t, s) in [(2.0, 0.0), (1.5, 0.5), (1.25, 0.75)] {
        let g = kernel_matrix(&prop, t, s).unwrap();
        assert!((&g - g.transpose()).amax() <= 1e-7, "t = {t}, s = {s}");
    }
}

#[test]
fn elliptic_kernel_matches_returned_adjoint_when_b_equals_c() {
    let mut model = Elliptic1DModel::constant(24, Boundary::Dirichlet, 1.0, 0.7, 0.7, 0.5, 1.0);
    model.a11.time = Schedule::Sinusoid { mean: 1.0, amplitude: 0.4, period: 0.7, phase: 0.0 };
    let path = build_elliptic_1d(&model).unwrap();
    let back = nonauto::forms::returned_adjoint(&path);
    let nodes = grid(0.0, 1.0, 5);
    let u = propagate_to_tolerance_aligned(&path, 0.0, 1.0, 1e-10, &nodes).unwrap();
    let v = propagate_to_tolerance_aligned(&back, 0.0, 1.0, 1e-10, &nodes).unwrap();
    for (t, s) in [(1.0, 0.0), (0.75, 0.25), (0.5, 0.0)] {
        let g = kernel_matrix(&u, t, s).unwrap();
        let h = kernel_matrix(&v, 1.0 - s, 1.0 - t).unwrap();
        assert!((&g - h.transpose()).amax() <= 1e-9 * g.amax().max(1.0), "t = {t}, s = {s}");
    }
}

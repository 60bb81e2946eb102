mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nonauto::forms::OperatorPath;
use nonauto::hilbert::{DiscreteSpace, NormIndex, operator_norm};
use nonauto::models::{build_dynamic_graph, GraphEdge, GraphModel, Schedule};
use nonauto::propagator::{assemble, propagate_to_tolerance_aligned, Partition};
use nonauto::properties::{
    check_domination, check_positivity, check_stochastic, criterion_positivity, equilibrium, grid, time_pairs,
    EquilibriumOutcome,
};

use common::metzler_generator;

#[test]
fn sign_criterion_implies_positive_propagator_on_a_corpus() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..9);
        let pieces: Vec<DMatrix<f64>> = (0..3).map(|_| metzler_generator(&mut rng, n)).collect();
        let space = DiscreteSpace::new((0..n).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
        let path = OperatorPath::piecewise_constant(space, 1.0, vec![0.3, 0.7], pieces).unwrap();
        let times = path.sample_times(16);
        let crit = criterion_positivity(&path, &times);
        assert!(crit.holds());
        let part = Partition::aligned_with(&path, &[], rng.gen_range(1..5)).unwrap();
        let prop = assemble(&path, &part).unwrap();
        let rep = check_positivity(&prop, &time_pairs(&grid(0.0, 1.0, 6))).unwrap();
        assert!(rep.holds(), "min entry {}", -rep.bound_measured);
        checked += 1;
    }
    assert_eq!(checked, 100);
}

/// Generator with zero weighted column sums: `-A` is Metzler and mass
/// preserving.
fn conservative(rng: &mut ChaCha8Rng, w: &[f64]) -> DMatrix<f64> {
    let n = w.len();
    let mut a = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { -rng.gen_range(0.0..1.5) });
    for j in 0..n {
        let off: f64 = (0..n).filter(|&i| i != j).map(|i| w[i] * a[(i, j)]).sum();
        a[(j, j)] = -off / w[j];
    }
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mass_is_preserved_on_any_partition(seed in any::<u64>(), n in 2usize..8, pieces in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
        let gens: Vec<DMatrix<f64>> = (0..4).map(|_| conservative(&mut rng, &w)).collect();
        let path = OperatorPath::piecewise_constant(DiscreteSpace::new(w).unwrap(), 2.0, vec![0.5, 0.9, 1.4], gens).unwrap();
        let part = Partition::aligned_with(&path, &[], pieces).unwrap();
        let prop = assemble(&path, &part).unwrap();
        let nodes = grid(0.0, 2.0, 5);
        let [crit, concl] = check_stochastic(&prop, &nodes, &time_pairs(&nodes)).unwrap();
        prop_assert!(crit.holds() && concl.holds(), "{:?}", concl.bound_measured);
    }

    #[test]
    fn domination_is_transitive(seed in any::<u64>(), len in 4usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schedules = vec![
            Schedule::Piecewise { breaks: vec![rng.gen_range(0.2..0.8)], values: vec![rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0)] },
            Schedule::constant(rng.gen_range(0.1..2.0)),
        ];
        let full = GraphModel {
            nodes: len,
            edges: (0..len - 1).map(|i| GraphEdge { initial: i, terminal: i + 1, schedule: i % 2 }).collect(),
            schedules,
            dirichlet_nodes: vec![],
            max_degree: Some(2),
            coords: None,
            horizon: 1.0,
        };
        let mid = GraphModel { dirichlet_nodes: vec![0], ..full.clone() };
        let small = GraphModel { dirichlet_nodes: vec![0, len - 1], ..full.clone() };
        let nodes = grid(0.0, 1.0, 4);
        let pairs = time_pairs(&nodes);
        let build = |m: &GraphModel| {
            let g = build_dynamic_graph(m).unwrap();
            let p = propagate_to_tolerance_aligned(&g.path, 0.0, 1.0, 1e-10, &nodes).unwrap();
            (g.retained, p)
        };
        let (rw, w) = build(&full);
        let (rv, v) = build(&mid);
        let (ru, u) = build(&small);
        prop_assert_eq!(rw.len(), len);
        // embeddings into the next larger retained set
        let into = |sub: &[usize], sup: &[usize]| -> Vec<usize> {
            sub.iter().map(|x| sup.iter().position(|y| y == x).unwrap()).collect()
        };
        let uv = check_domination(&u, &v, Some(&into(&ru, &rv)), &pairs, 1).unwrap();
        let vw = check_domination(&v, &w, Some(&into(&rv, &rw)), &pairs, 2).unwrap();
        prop_assert!(uv.holds() && vw.holds());
        let uw = check_domination(&u, &w, Some(&into(&ru, &rw)), &pairs, 3).unwrap();
        prop_assert!(uw.margin >= -2e-10, "margin {}", uw.margin);
    }
}

fn k2(scale: f64) -> OperatorPath {
    let m = Schedule::Sinusoid { mean: 1.5 * scale, amplitude: 0.5 * scale, period: 1.1, phase: 0.0 };
    let g = GraphModel {
        nodes: 2,
        edges: vec![GraphEdge { initial: 0, terminal: 1, schedule: 0 }],
        schedules: vec![m],
        dirichlet_nodes: vec![],
        max_degree: None,
        coords: None,
        horizon: 3.0,
    };
    build_dynamic_graph(&g).unwrap().path
}

#[test]
fn doubling_the_rate_doubles_the_gap_and_speeds_decay() {
    let times = grid(0.0, 3.0, 13);
    let mut last: Option<(f64, Vec<f64>)> = None;
    for scale in [1.0, 2.0] {
        let path = k2(scale);
        let eq = match equilibrium(&path, 16, &times).unwrap() {
            EquilibriumOutcome::Found(e) => e,
            EquilibriumOutcome::NotApplicable { reason, .. } => panic!("{reason}"),
        };
        let prop = propagate_to_tolerance_aligned(&path, 0.0, 3.0, 1e-10, &times).unwrap();
        let integral = eq.gap_profile.integral(0.0, 3.0);
        let dists: Vec<f64> = times[1..]
            .iter()
            .map(|&t| operator_norm(path.space(), &(prop.evaluate(t, 0.0).unwrap() - &eq.projector), NormIndex::Two, NormIndex::Two).unwrap())
            .collect();
        if let Some((prev_int, prev)) = &last {
            assert!(integral >= 2.0 * prev_int - 1e-9);
            for (a, b) in dists.iter().zip(prev) {
                assert!(*a <= *b + 1e-12);
            }
        }
        last = Some((integral, dists));
    }
}

#[test]
fn rank_one_limit_is_an_invariant_projector() {
    let path = k2(1.0);
    let times = grid(0.0, 3.0, 7);
    let eq = match equilibrium(&path, 16, &times).unwrap() {
        EquilibriumOutcome::Found(e) => e,
        EquilibriumOutcome::NotApplicable { reason, .. } => panic!("{reason}"),
    };
    let p = &eq.projector;
    assert!((p * p - p).amax() <= 1e-9);
    let pairing: f64 = eq.phi.iter().zip(&eq.u).zip(path.space().weights()).map(|((f, u), w)| f * u * w).sum();
    assert!((pairing - 1.0).abs() <= 1e-12);
    let prop = propagate_to_tolerance_aligned(&path, 0.0, 3.0, 1e-10, &times).unwrap();
    for (t, s) in time_pairs(&times) {
        let u = prop.evaluate(t, s).unwrap();
        assert!((&u * p - p).amax() <= 1e-9, "t = {t}, s = {s}");
    }
}

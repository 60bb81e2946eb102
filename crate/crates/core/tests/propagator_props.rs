mod common;

use std::sync::Arc;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nonauto::forms::{omega_profile, MatrixFn, OperatorPath, Regularity};
use nonauto::hilbert::DiscreteSpace;
use nonauto::kernels::kernel_matrix;
use nonauto::propagator::{assemble, ode_oracle, propagate_to_tolerance, Partition};
use nonauto::properties::{
    check_quasi_contractivity, check_rescaling_identity, check_returned_adjoint_identity, time_pairs,
};

use common::{elliptic_path, gaussian_matrix, spectral_distance};

fn bounded_smooth_path(seed: u64, n: usize) -> OperatorPath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a0 = gaussian_matrix(&mut rng, n, 1.0);
    let a1 = gaussian_matrix(&mut rng, n, 1.0);
    // keep |A(t)| <= 10 in the flat 2-norm
    let scale = 4.0 / (nonauto::hilbert::spectral_norm(&a0) + nonauto::hilbert::spectral_norm(&a1));
    let (a0, a1) = (a0 * scale, a1 * scale);
    let eval: MatrixFn = Arc::new(move |t: f64| &a0 + &a1 * (4.0 * t).cos());
    OperatorPath::new(DiscreteSpace::uniform(n), 1.0, eval, Regularity::Smooth { kinks: vec![] }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rescaling_and_returned_adjoint_hold_on_any_partition(
        seed in any::<u64>(), n in 1usize..7, pieces in 1usize..9, omega in -2.0f64..2.0,
    ) {
        let path = elliptic_path(seed, (seed % 2) as usize, n);
        let part = Partition::aligned_with(&path, &[], pieces).unwrap();
        let prop = assemble(&path, &part).unwrap();
        let pairs = time_pairs(part.points());
        let r = check_rescaling_identity(&prop, omega, &pairs).unwrap();
        prop_assert!(r.holds(), "rescaling error {}", r.bound_measured);
        let a = check_returned_adjoint_identity(&prop, &pairs).unwrap();
        prop_assert!(a.holds(), "returned adjoint error {}", a.bound_measured);
    }

    #[test]
    fn product_bound_holds_for_every_tested_partition(seed in any::<u64>(), n in 1usize..7, pieces in 1usize..17) {
        let path = elliptic_path(seed, (seed % 2) as usize, n);
        let part = Partition::aligned_with(&path, &[], pieces).unwrap();
        let prop = assemble(&path, &part).unwrap();
        // segment averages satisfy the bound between partition points
        let nodes = part.points().to_vec();
        let omega = omega_profile(&path, &nodes).unwrap();
        let r = check_quasi_contractivity(&prop, &omega, &time_pairs(&nodes)).unwrap();
        prop_assert!(r.holds(), "margin {}", r.margin);
    }

    #[test]
    fn kernels_compose_at_partition_points(seed in any::<u64>(), n in 1usize..6) {
        let path = elliptic_path(seed, 1, n);
        let part = Partition::aligned_with(&path, &[], 4).unwrap();
        let prop = assemble(&path, &part).unwrap();
        let pts = part.points().to_vec();
        let (s, r, t) = (pts[0], pts[pts.len() / 2], pts[pts.len() - 1]);
        let w = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(path.space().weights()));
        let lhs = kernel_matrix(&prop, t, s).unwrap();
        let rhs = kernel_matrix(&prop, t, r).unwrap() * w * kernel_matrix(&prop, r, s).unwrap();
        prop_assert!((&lhs - &rhs).amax() <= 1e-9 * lhs.amax().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn converged_propagator_agrees_with_ode_oracle(seed in any::<u64>(), n in 2usize..5) {
        let path = bounded_smooth_path(seed, n);
        let prop = propagate_to_tolerance(&path, 0.0, 1.0, 1e-7).unwrap();
        let oracle = ode_oracle(&path, 0.0, 1.0, 1e-10).unwrap();
        let gap = spectral_distance(&prop.evaluate(1.0, 0.0).unwrap(), &oracle);
        prop_assert!(gap <= 1e-6, "gap {gap}");
    }
}

#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::DMatrix;
use nonauto::forms::{MatrixFn, OperatorPath, Regularity};
use nonauto::hilbert::DiscreteSpace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.5..2.0)).collect()
}

/// Random elliptic path of dimension `n` on `[0, 1]`. Even `index` gives a
/// smooth non-commuting path, odd `index` a three-piece constant one.
pub fn elliptic_path(seed: u64, index: usize, n: usize) -> OperatorPath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9));
    let space = DiscreteSpace::new(random_weights(&mut rng, n)).unwrap();
    let s = 1.0 / (n as f64).sqrt();
    let b0 = gaussian_matrix(&mut rng, n, s);
    let base = b0.transpose() * &b0;
    let drift = gaussian_matrix(&mut rng, n, 0.5 * s);
    if index % 2 == 0 {
        let wobble = gaussian_matrix(&mut rng, n, 0.5 * s);
        let wobble = &wobble + wobble.transpose();
        let eval: MatrixFn = Arc::new(move |t: f64| {
            &base + &wobble * (2.0 * std::f64::consts::PI * t).sin() + &drift * t
        });
        OperatorPath::new(space, 1.0, eval, Regularity::Smooth { kinks: vec![] }).unwrap()
    } else {
        let pieces = (0..3)
            .map(|k| &base + &drift * (k as f64 - 1.0) + gaussian_matrix(&mut rng, n, 0.3 * s))
            .collect();
        OperatorPath::piecewise_constant(space, 1.0, vec![0.3, 0.65], pieces).unwrap()
    }
}

/// Metzler-sign generator: `-A` has nonnegative off-diagonal entries.
pub fn metzler_generator(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let mut a = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { -rng.gen_range(0.0..1.0) });
    for i in 0..n {
        a[(i, i)] = rng.gen_range(-0.5..1.5);
    }
    a
}

pub fn spectral_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    nonauto::hilbert::spectral_norm(&(a - b))
}

//! Finite-dimensional weighted spaces: norms, matrix exponentials, operator
//! norms and spectral summaries of Hermitian parts.
//!
//! A [`DiscreteSpace`] carries positive node weights `w`; the pivot inner
//! product is `(u|v) = sum_i w_i u_i v_i`. All matrices act on coordinate
//! vectors. Weighted quantities are computed by conjugating with
//! `diag(sqrt(w))`, which turns the weighted space into flat Euclidean space.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSpace {
    weights: Vec<f64>,
    /// Gram matrix of the energy inner product, `||u||_V^2 = u^T G u`.
    v_metric: Option<DMatrix<f64>>,
    /// One-dimensional node positions, when the space has a geometry.
    coords: Option<Vec<f64>>,
}

impl DiscreteSpace {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("space must have at least one node".into()));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "weight {i} must be finite and positive, got {}",
                weights[i]
            )));
        }
        Ok(Self {
            weights,
            v_metric: None,
            coords: None,
        })
    }

    pub fn uniform(dim: usize) -> Self {
        Self::new(vec![1.0; dim.max(1)]).expect("unit weights are valid")
    }

    pub fn with_v_metric(mut self, gram: DMatrix<f64>) -> Result<Self> {
        let n = self.dim();
        if gram.nrows() != n || gram.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: gram.nrows(),
            });
        }
        let sym = (&gram + gram.transpose()) * 0.5;
        if (&sym - &gram).amax() > 1e-10 * gram.amax().max(1.0) {
            return Err(Error::InvalidInput("V-metric must be symmetric".into()));
        }
        if sym.clone().cholesky().is_none() {
            return Err(Error::InvalidInput("V-metric must be positive definite".into()));
        }
        self.v_metric = Some(sym);
        Ok(self)
    }

    pub fn with_coords(mut self, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: coords.len(),
            });
        }
        self.coords = Some(coords);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn v_metric(&self) -> Option<&DMatrix<f64>> {
        self.v_metric.as_ref()
    }

    pub fn coords(&self) -> Option<&[f64]> {
        self.coords.as_deref()
    }

    /// Gram matrix of the energy norm, falling back to the pivot metric.
    pub fn v_gram(&self) -> DMatrix<f64> {
        match &self.v_metric {
            Some(g) => g.clone(),
            None => self.weight_matrix(),
        }
    }

    pub fn weight_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.weights))
    }

    /// Restriction to a subset of nodes (rows and columns of the energy
    /// metric are kept for the retained nodes).
    pub fn restrict(&self, keep: &[usize]) -> Result<Self> {
        let weights = keep.iter().map(|&i| self.weights[i]).collect();
        let mut out = Self::new(weights)?;
        if let Some(g) = &self.v_metric {
            out = out.with_v_metric(g.select_rows(keep).select_columns(keep))?;
        }
        if let Some(c) = &self.coords {
            out.coords = Some(keep.iter().map(|&i| c[i]).collect());
        }
        Ok(out)
    }

    /// `diag(sqrt(w)) A diag(1/sqrt(w))`, the matrix of `A` in an orthonormal basis.
    pub fn to_flat(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = a.clone();
        for j in 0..n {
            for i in 0..n {
                out[(i, j)] *= (self.weights[i] / self.weights[j]).sqrt();
            }
        }
        out
    }

    /// Weighted adjoint `W^{-1} A^T W`.
    pub fn adjoint(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| a[(j, i)] * self.weights[j] / self.weights[i])
    }

    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        u.iter()
            .zip(v)
            .zip(&self.weights)
            .map(|((a, b), w)| a * b * w)
            .sum()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: len,
            });
        }
        Ok(())
    }

    pub(crate) fn check_square(&self, a: &DMatrix<f64>) -> Result<()> {
        self.check_len(a.nrows())?;
        self.check_len(a.ncols())
    }
}

/// Weighted `L^p` norm `(sum_i w_i |u_i|^p)^(1/p)`; `p = f64::INFINITY` gives the max norm.
pub fn weighted_norm(space: &DiscreteSpace, u: &[f64], p: f64) -> Result<f64> {
    space.check_len(u.len())?;
    lp_from_abs(space.weights(), u.iter().map(|x| x.abs()), p)
}

pub fn weighted_norm_complex(space: &DiscreteSpace, u: &[Complex<f64>], p: f64) -> Result<f64> {
    space.check_len(u.len())?;
    lp_from_abs(space.weights(), u.iter().map(|z| z.norm()), p)
}

fn lp_from_abs(w: &[f64], abs: impl Iterator<Item = f64>, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidInput(format!("norm exponent must be >= 1, got {p}")));
    }
    if p.is_infinite() {
        return Ok(abs.fold(0.0, f64::max));
    }
    let vals: Vec<f64> = abs.collect();
    let scale = vals.iter().cloned().fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok(0.0);
    }
    let s: f64 = vals
        .iter()
        .zip(w)
        .map(|(a, wi)| wi * (a / scale).powf(p))
        .sum();
    Ok(scale * s.powf(1.0 / p))
}

// Pade coefficients and thresholds for scaling and squaring (degree 3..13).
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068),
];
const THETA13: f64 = 5.371920351148152;

/// `exp(-r A)` by scaling and squaring with a Pade approximant whose degree
/// is chosen from the 1-norm of `r A`.
pub fn matrix_exponential(a: &DMatrix<f64>, r: f64) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    if !r.is_finite() {
        return Err(Error::InvalidInput(format!("time step must be finite, got {r}")));
    }
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            if !a[(i, j)].is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
        }
    }
    let n = a.nrows();
    let x = a * (-r);
    let norm1 = one_norm(&x);
    if norm1 == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    for (deg, theta) in THETA {
        if norm1 <= theta {
            let coeffs: &[f64] = match deg {
                3 => &PADE3,
                5 => &PADE5,
                7 => &PADE7,
                _ => &PADE9,
            };
            return finish(pade_low(&x, coeffs)?);
        }
    }
    let s = (norm1 / THETA13).log2().ceil().max(0.0);
    if s > 1000.0 {
        return Err(Error::Overflow(format!("1-norm {norm1:e} too large to scale")));
    }
    let s = s as i32;
    let xs = x * 2f64.powi(-s);
    let mut e = pade13(&xs)?;
    for _ in 0..s {
        e = &e * &e;
        if !e.iter().all(|v| v.is_finite()) {
            return Err(Error::Overflow("squaring phase produced non-finite entries".into()));
        }
    }
    finish(e)
}

fn finish(e: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if e.iter().all(|v| v.is_finite()) {
        Ok(e)
    } else {
        Err(Error::Overflow("matrix exponential is not finite".into()))
    }
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn pade_low(x: &DMatrix<f64>, b: &[f64]) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let x2 = x * x;
    let mut pow = id.clone();
    let mut u = &id * b[1];
    let mut v = &id * b[0];
    let mut k = 2;
    while k < b.len() {
        pow = &pow * &x2;
        v += &pow * b[k];
        u += &pow * b[k + 1];
        k += 2;
    }
    let u = x * u;
    solve_pade(v, u)
}

fn pade13(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let b = &PADE13;
    let n = x.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let x2 = x * x;
    let x4 = &x2 * &x2;
    let x6 = &x4 * &x2;
    let inner_u = &x6 * b[13] + &x4 * b[11] + &x2 * b[9];
    let u = x * (&x6 * inner_u + &x6 * b[7] + &x4 * b[5] + &x2 * b[3] + &id * b[1]);
    let inner_v = &x6 * b[12] + &x4 * b[10] + &x2 * b[8];
    let v = &x6 * inner_v + &x6 * b[6] + &x4 * b[4] + &x2 * b[2] + &id * b[0];
    solve_pade(v, u)
}

fn solve_pade(v: DMatrix<f64>, u: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = &v + &u;
    let q = v - u;
    q.lu()
        .solve(&p)
        .ok_or_else(|| Error::Overflow("Pade denominator is singular".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NormIndex {
    One,
    Two,
    Inf,
}

impl NormIndex {
    pub fn exponent(self) -> f64 {
        match self {
            NormIndex::One => 1.0,
            NormIndex::Two => 2.0,
            NormIndex::Inf => f64::INFINITY,
        }
    }
}

impl std::fmt::Display for NormIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormIndex::One => "1",
            NormIndex::Two => "2",
            NormIndex::Inf => "inf",
        })
    }
}

const SUPPORTED_PAIRS: &str = "(1,1), (1,2), (1,inf), (2,2), (2,inf), (inf,inf)";

/// Operator norm `L^{p_in} -> L^{p_out}` in the weighted metric.
pub fn operator_norm(
    space: &DiscreteSpace,
    a: &DMatrix<f64>,
    p_in: NormIndex,
    p_out: NormIndex,
) -> Result<f64> {
    use NormIndex::*;
    space.check_square(a)?;
    let w = space.weights();
    let n = space.dim();
    let v = match (p_in, p_out) {
        (Two, Two) => spectral_norm(&space.to_flat(a)),
        (One, One) => (0..n)
            .map(|j| (0..n).map(|i| w[i] * a[(i, j)].abs()).sum::<f64>() / w[j])
            .fold(0.0, f64::max),
        (Inf, Inf) => (0..n)
            .map(|i| (0..n).map(|j| a[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max),
        (One, Inf) => {
            let mut m = 0.0f64;
            for j in 0..n {
                for i in 0..n {
                    m = m.max(a[(i, j)].abs() / w[j]);
                }
            }
            m
        }
        (One, Two) => (0..n)
            .map(|j| (0..n).map(|i| w[i] * a[(i, j)].powi(2)).sum::<f64>().sqrt() / w[j])
            .fold(0.0, f64::max),
        (Two, Inf) => (0..n)
            .map(|i| (0..n).map(|j| a[(i, j)].powi(2) / w[j]).sum::<f64>().sqrt())
            .fold(0.0, f64::max),
        _ => {
            return Err(Error::UnsupportedNormPair {
                p_in: p_in.to_string(),
                p_out: p_out.to_string(),
                supported: SUPPORTED_PAIRS.into(),
            })
        }
    };
    Ok(v)
}

/// Largest singular value; SVD up to dimension 512, power iteration on
/// `M^T M` above that.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.nrows().max(m.ncols()) <= 512 {
        return m
            .singular_values()
            .iter()
            .cloned()
            .fold(0.0, f64::max);
    }
    let mtm = m.transpose() * m;
    let mut x = DVector::from_fn(m.ncols(), |i, _| 1.0 + (i % 7) as f64 * 0.1);
    x /= x.norm();
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let y = &mtm * &x;
        let ny = y.norm();
        if ny == 0.0 {
            return 0.0;
        }
        let next = ny;
        x = y / ny;
        if (next - lambda).abs() <= 1e-15 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.sqrt()
}

/// Logarithmic norm of `m` for the weighted `L^1`, `L^2` or `L^inf` norm, so
/// that `||exp(r m)|| <= exp(r mu(m))` for `r >= 0`.
pub fn log_norm(space: &DiscreteSpace, m: &DMatrix<f64>, p: NormIndex) -> Result<f64> {
    space.check_square(m)?;
    let n = space.dim();
    let w = space.weights();
    Ok(match p {
        NormIndex::Two => {
            let f = space.to_flat(m);
            let h = (&f + f.transpose()) * 0.5;
            sym_eigenvalues(&h)?.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        }
        NormIndex::Inf => (0..n)
            .map(|i| {
                m[(i, i)] + (0..n).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max),
        NormIndex::One => (0..n)
            .map(|j| {
                m[(j, j)]
                    + (0..n)
                        .filter(|&i| i != j)
                        .map(|i| w[i] * m[(i, j)].abs())
                        .sum::<f64>()
                        / w[j]
            })
            .fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralSummary {
    /// Largest eigenvalue of the weighted Hermitian part.
    pub max_sym_eigen: f64,
    /// Smallest eigenvalue of the weighted Hermitian part.
    pub min_sym_eigen: f64,
    /// Smallest eigenvalue of the Hermitian part compressed to the weighted
    /// orthogonal complement of the supplied kernel vector.
    pub spectral_gap_on_complement: Option<f64>,
}

/// Eigenvalue bounds of `(A + A^*)/2` in the weighted metric.
///
/// `max_sym_eigen` of `-A` is the smallest `omega` with
/// `Re (A u|u) + omega ||u||^2 >= 0`.
pub fn spectral_summary(
    space: &DiscreteSpace,
    a: &DMatrix<f64>,
    kernel: Option<&[f64]>,
) -> Result<SpectralSummary> {
    space.check_square(a)?;
    let f = space.to_flat(a);
    let h = (&f + f.transpose()) * 0.5;
    let eig = sym_eigenvalues(&h)?;
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let gap = match kernel {
        None => None,
        Some(k) => {
            space.check_len(k.len())?;
            Some(compressed_min_eigen(space, &h, k)?)
        }
    };
    Ok(SpectralSummary {
        max_sym_eigen: max,
        min_sym_eigen: min,
        spectral_gap_on_complement: gap,
    })
}

fn compressed_min_eigen(space: &DiscreteSpace, h_flat: &DMatrix<f64>, k: &[f64]) -> Result<f64> {
    let n = space.dim();
    let mut q = DVector::from_fn(n, |i, _| k[i] * space.weights()[i].sqrt());
    let nq = q.norm();
    if nq == 0.0 {
        return Err(Error::InvalidInput("kernel vector must be nonzero".into()));
    }
    q /= nq;
    if n == 1 {
        return Ok(f64::INFINITY);
    }
    // Householder reflector sending q to +-e_1; its remaining columns span q-perp.
    let sign = if q[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut v = q.clone();
    v[0] += sign;
    let vv = v.dot(&v);
    let p = DMatrix::<f64>::identity(n, n) - (&v * v.transpose()) * (2.0 / vv);
    let basis = p.columns(1, n - 1).into_owned();
    let c = basis.transpose() * h_flat * &basis;
    let c = (&c + c.transpose()) * 0.5;
    Ok(sym_eigenvalues(&c)?
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min))
}

pub(crate) fn sym_eigenvalues(h: &DMatrix<f64>) -> Result<DVector<f64>> {
    SymmetricEigen::try_new(h.clone(), f64::EPSILON, 10_000)
        .map(|e| e.eigenvalues)
        .ok_or(Error::EigenNonConvergence)
}

/// Generalized symmetric eigenvalues of `(S, G)` with `G` positive definite.
pub(crate) fn generalized_eigenvalues(s: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<DVector<f64>> {
    let chol = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("metric is not positive definite".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("metric is singular".into()))?;
    let m = &linv * s * linv.transpose();
    sym_eigenvalues(&((&m + m.transpose()) * 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        (a - b).amax() <= tol
    }

    #[test]
    fn norm_examples() {
        let s = DiscreteSpace::uniform(3);
        assert_eq!(weighted_norm(&s, &[1.0, 0.0, 0.0], 2.0).unwrap(), 1.0);
        let s4 = DiscreteSpace::uniform(4);
        assert_eq!(weighted_norm(&s4, &[1.0; 4], 1.0).unwrap(), 4.0);
        let half = DiscreteSpace::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(weighted_norm(&half, &[2.0, 2.0], 1.0).unwrap(), 2.0);
        assert!(matches!(
            weighted_norm(&half, &[1.0], 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn exponential_examples() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(matrix_exponential(&z, 2.0).unwrap(), DMatrix::identity(3, 3));
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let e = matrix_exponential(&d, 1.0).unwrap();
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![(-1f64).exp(), (-2f64).exp()]));
        assert!(close(&e, &want, 1e-15));
        let nil = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 0.0]);
        let e = matrix_exponential(&nil, 1.0).unwrap();
        assert!(close(&e, &DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]), 1e-15));
        let bad = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matches!(matrix_exponential(&bad, 1.0), Err(Error::NonFinite { .. })));
        let huge = DMatrix::from_row_slice(1, 1, &[-1e6]);
        assert!(matches!(matrix_exponential(&huge, 1.0), Err(Error::Overflow(_))));
    }

    #[test]
    fn exponential_of_rotation_generator() {
        // exp(t J) for J = [[0,-1],[1,0]] is a rotation by t.
        let j = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        for &t in &[0.01, 0.7, 3.0, 25.0] {
            let e = matrix_exponential(&j, t).unwrap();
            let want = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
            assert!(close(&e, &want, 1e-12 * t.max(1.0)));
        }
    }

    #[test]
    fn operator_norm_examples() {
        let s = DiscreteSpace::uniform(2);
        let id = DMatrix::<f64>::identity(2, 2);
        use NormIndex::*;
        assert!((operator_norm(&s, &id, Two, Two).unwrap() - 1.0).abs() < 1e-15);
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 3.0, 0.0, 0.0]);
        assert_eq!(operator_norm(&s, &a, One, Inf).unwrap(), 3.0);
        let half = DiscreteSpace::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(operator_norm(&half, &id, One, Inf).unwrap(), 2.0);
        let err = operator_norm(&s, &id, Inf, One).unwrap_err();
        assert!(err.to_string().contains("(2,inf)"));
    }

    #[test]
    fn spectral_summary_examples() {
        let s = DiscreteSpace::uniform(2);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]));
        let r = spectral_summary(&s, &d, None).unwrap();
        assert!((r.min_sym_eigen - 1.0).abs() < 1e-14 && (r.max_sym_eigen - 3.0).abs() < 1e-14);
        let lap = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let r = spectral_summary(&s, &lap, Some(&[1.0, 1.0])).unwrap();
        assert!((r.spectral_gap_on_complement.unwrap() - 2.0).abs() < 1e-14);
        let skew = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, -2.0, 0.0]);
        let r = spectral_summary(&s, &skew, None).unwrap();
        assert!(r.min_sym_eigen.abs() < 1e-15 && r.max_sym_eigen.abs() < 1e-15);
    }

    fn matrix_strategy(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        prop::collection::vec(-2.0f64..2.0, n * n)
            .prop_map(move |v| DMatrix::from_row_slice(n, n, &v))
    }

    fn weights_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.1f64..3.0, n)
    }

    proptest! {
        #[test]
        fn semigroup_property(a in matrix_strategy(4), r1 in 0.0f64..2.0, r2 in 0.0f64..2.0) {
            let e1 = matrix_exponential(&a, r1).unwrap();
            let e2 = matrix_exponential(&a, r2).unwrap();
            let e12 = matrix_exponential(&a, r1 + r2).unwrap();
            let scale = e12.amax().max(1.0);
            prop_assert!((&e1 * &e2 - &e12).amax() <= 1e-10 * scale);
        }

        #[test]
        fn psd_generators_contract(b in matrix_strategy(4), w in weights_strategy(4), r in 0.0f64..3.0) {
            // A = W^{-1} B^T B is self-adjoint and nonnegative in the weighted metric.
            let space = DiscreteSpace::new(w.clone()).unwrap();
            let btb = b.transpose() * &b;
            let a = DMatrix::from_fn(4, 4, |i, j| btb[(i, j)] / w[i]);
            let e = matrix_exponential(&a, r).unwrap();
            let n = operator_norm(&space, &e, NormIndex::Two, NormIndex::Two).unwrap();
            prop_assert!(n <= 1.0 + 1e-12);
        }

        #[test]
        fn submultiplicative(a in matrix_strategy(3), b in matrix_strategy(3), w in weights_strategy(3)) {
            use NormIndex::*;
            let space = DiscreteSpace::new(w).unwrap();
            let ab = &a * &b;
            for p in [One, Two, Inf] {
                let lhs = operator_norm(&space, &ab, p, p).unwrap();
                let rhs = operator_norm(&space, &a, p, p).unwrap() * operator_norm(&space, &b, p, p).unwrap();
                prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-14);
            }
            // ||AB||_{1->inf} <= ||A||_{2->inf} ||B||_{1->2}
            let lhs = operator_norm(&space, &ab, One, Inf).unwrap();
            let rhs = operator_norm(&space, &a, Two, Inf).unwrap() * operator_norm(&space, &b, One, Two).unwrap();
            prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-14);
        }

        #[test]
        fn omega_bounds_numerical_range(a in matrix_strategy(5), w in weights_strategy(5), seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let space = DiscreteSpace::new(w).unwrap();
            let omega = spectral_summary(&space, &(-&a), None).unwrap().max_sym_eigen;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..1000 {
                let u: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let au: Vec<f64> = (0..5).map(|i| (0..5).map(|j| a[(i, j)] * u[j]).sum()).collect();
                let lhs = space.inner(&au, &u) + omega * space.inner(&u, &u);
                prop_assert!(lhs >= -1e-9);
            }
        }

        #[test]
        fn operator_norms_dominate_sampled_ratios(a in matrix_strategy(3), w in weights_strategy(3), u in prop::collection::vec(-1.0f64..1.0, 3)) {
            use NormIndex::*;
            let space = DiscreteSpace::new(w).unwrap();
            let au: Vec<f64> = (0..3).map(|i| (0..3).map(|j| a[(i, j)] * u[j]).sum()).collect();
            for (pi, po) in [(One, One), (One, Two), (One, Inf), (Two, Two), (Two, Inf), (Inf, Inf)] {
                let nu = weighted_norm(&space, &u, pi.exponent()).unwrap();
                let nau = weighted_norm(&space, &au, po.exponent()).unwrap();
                let op = operator_norm(&space, &a, pi, po).unwrap();
                prop_assert!(nau <= op * nu * (1.0 + 1e-12) + 1e-14);
            }
        }
    }
}

//! Numerical checks of qualitative properties of propagators: quasi-
//! contractivity, positivity, `L^p` bounds, domination, mass conservation,
//! convergence to equilibrium and uniform exponential stability.
//!
//! Every check returns a [`PropertyReport`] whose JSON form has a fixed key
//! order, so reports for a fixed seed are byte-identical across runs.

use std::collections::BTreeMap;

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forms::{average_operator, rescaled, returned_adjoint, OperatorPath, ScalarProfile};
use crate::hilbert::{
    log_norm, operator_norm, spectral_summary, weighted_norm, weighted_norm_complex, DiscreteSpace,
    NormIndex,
};
use crate::propagator::{assemble, Propagator};

pub const POSITIVITY_TOL: f64 = 1e-10;
pub const CONTRACTIVITY_TOL: f64 = 1e-9;
pub const QUASI_CONTRACTIVITY_TOL: f64 = 1e-9;
pub const MASS_CRITERION_TOL: f64 = 1e-10;
pub const MASS_TOL: f64 = 1e-9;
pub const DOMINATION_TOL: f64 = 1e-10;
pub const KERNEL_ANGLE_TOL: f64 = 1e-8;
pub const LONGTIME_TOL: f64 = 1e-8;
pub const LP_RELATIVE_TOL: f64 = 1e-9;
pub const IDENTITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Fails,
    NotApplicable,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Witness {
    pub t: Option<f64>,
    pub s: Option<f64>,
    pub i: Option<usize>,
    pub j: Option<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyReport {
    pub property_name: String,
    pub verdict: Verdict,
    /// Worst observed sample; present whenever samples were evaluated.
    pub witness: Option<Witness>,
    /// Bound (or tolerance) at the worst sample.
    pub bound_requested: f64,
    /// Measured quantity at the worst sample.
    pub bound_measured: f64,
    /// Smallest `bound - measured` over all samples.
    pub margin: f64,
    pub samples_used: usize,
    pub seed: Option<u64>,
    pub reason: Option<String>,
    pub details: BTreeMap<String, f64>,
}

impl PropertyReport {
    pub(crate) fn new(name: &str) -> Self {
        Self {
            property_name: name.to_string(),
            verdict: Verdict::Holds,
            witness: None,
            bound_requested: 0.0,
            bound_measured: 0.0,
            margin: f64::INFINITY,
            samples_used: 0,
            seed: None,
            reason: None,
            details: BTreeMap::new(),
        }
    }

    pub fn not_applicable(name: &str, reason: impl Into<String>) -> Self {
        let mut r = Self::new(name);
        r.verdict = Verdict::NotApplicable;
        r.margin = 0.0;
        r.reason = Some(reason.into());
        r
    }

    pub fn holds(&self) -> bool {
        self.verdict == Verdict::Holds
    }

    /// Records one sample of `measured <= bound + slack`.
    pub(crate) fn record(&mut self, measured: f64, bound: f64, slack: f64, witness: Witness) {
        self.samples_used += 1;
        let margin = bound - measured;
        if margin < self.margin || self.witness.is_none() {
            self.margin = margin;
            self.bound_measured = measured;
            self.bound_requested = bound;
            self.witness = Some(witness);
        }
        if !(measured <= bound + slack) {
            self.verdict = Verdict::Fails;
        }
    }

    pub(crate) fn detail(&mut self, key: &str, value: f64) {
        self.details.insert(key.to_string(), value);
    }
}

/// All pairs `(t, s)` with `s < t` drawn from `nodes`.
pub fn time_pairs(nodes: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for (i, &t) in nodes.iter().enumerate() {
        for &s in &nodes[..i] {
            if s < t {
                out.push((t, s));
            }
        }
    }
    out
}

/// `n` equispaced nodes on `[a, b]`.
pub fn grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn evaluate_pairs(prop: &Propagator, pairs: &[(f64, f64)]) -> Result<Vec<DMatrix<f64>>> {
    pairs.par_iter().map(|&(t, s)| prop.evaluate(t, s)).collect()
}

fn pair_witness(t: f64, s: f64, value: f64) -> Witness {
    Witness {
        t: Some(t),
        s: Some(s),
        i: None,
        j: None,
        value,
    }
}

/// `||U(t,s)|| <= exp(int_s^t omega) + 1e-9` on the pair grid.
pub fn check_quasi_contractivity(
    prop: &Propagator,
    omega: &ScalarProfile,
    pairs: &[(f64, f64)],
) -> Result<PropertyReport> {
    let space = prop.path().space();
    let mats = evaluate_pairs(prop, pairs)?;
    let norms = mats
        .par_iter()
        .map(|u| operator_norm(space, u, NormIndex::Two, NormIndex::Two))
        .collect::<Result<Vec<_>>>()?;
    let mut rep = PropertyReport::new("quasi_contractivity");
    for (&(t, s), n) in pairs.iter().zip(norms) {
        let bound = omega.integral(s, t).exp();
        rep.record(n, bound, QUASI_CONTRACTIVITY_TOL, pair_witness(t, s, n));
    }
    Ok(rep)
}

/// `U_omega(t,s) = exp(-omega (t-s)) U(t,s)` for the shifted path, assembled
/// on the same partition.
pub fn check_rescaling_identity(prop: &Propagator, omega: f64, pairs: &[(f64, f64)]) -> Result<PropertyReport> {
    let shifted = assemble(&rescaled(prop.path(), omega), prop.partition())?;
    let space = prop.path().space();
    let diffs = pairs
        .par_iter()
        .map(|&(t, s)| {
            let lhs = shifted.evaluate(t, s)?;
            let rhs = prop.evaluate(t, s)? * (-omega * (t - s)).exp();
            operator_norm(space, &(lhs - rhs), NormIndex::Two, NormIndex::Two)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rep = PropertyReport::new("rescaling_identity");
    for (&(t, s), d) in pairs.iter().zip(diffs) {
        rep.record(d, IDENTITY_TOL, 0.0, pair_witness(t, s, d));
    }
    rep.detail("omega", omega);
    Ok(rep)
}

/// `U(t,s) = V(T-s, T-t)^*` where `V` is the propagator of the returned
/// adjoint path on the reflected partition.
pub fn check_returned_adjoint_identity(prop: &Propagator, pairs: &[(f64, f64)]) -> Result<PropertyReport> {
    let path = prop.path();
    let horizon = path.horizon();
    let back = assemble(&returned_adjoint(path), &prop.partition().reflect(horizon))?;
    let space = path.space();
    let diffs = pairs
        .par_iter()
        .map(|&(t, s)| {
            let v = back.evaluate(horizon - s, horizon - t)?;
            let u = prop.evaluate(t, s)?;
            operator_norm(space, &(u - space.adjoint(&v)), NormIndex::Two, NormIndex::Two)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rep = PropertyReport::new("returned_adjoint_identity");
    for (&(t, s), d) in pairs.iter().zip(diffs) {
        rep.record(d, IDENTITY_TOL, 0.0, pair_witness(t, s, d));
    }
    Ok(rep)
}

/// Sign structure of the generators: off-diagonal entries of `A(t)` must be
/// nonpositive, i.e. `-A(t)` is a Metzler matrix.
pub fn criterion_positivity(path: &OperatorPath, times: &[f64]) -> PropertyReport {
    let mut rep = PropertyReport::new("positivity_criterion");
    for &t in times {
        let a = path.evaluate(t);
        let scale = a.amax().max(1.0);
        let n = a.nrows();
        let mut worst = (0.0f64, 0, 0);
        for j in 0..n {
            for i in 0..n {
                if i != j && a[(i, j)] > worst.0 {
                    worst = (a[(i, j)], i, j);
                }
            }
        }
        rep.record(
            worst.0,
            0.0,
            1e-12 * scale,
            Witness {
                t: Some(t),
                s: None,
                i: Some(worst.1),
                j: Some(worst.2),
                value: worst.0,
            },
        );
    }
    rep
}

/// `U(t,s) >= -1e-10` entrywise on the pair grid.
pub fn check_positivity(prop: &Propagator, pairs: &[(f64, f64)]) -> Result<PropertyReport> {
    let mats = evaluate_pairs(prop, pairs)?;
    let mut rep = PropertyReport::new("positivity");
    for (&(t, s), u) in pairs.iter().zip(&mats) {
        let (mut v, mut wi, mut wj) = (f64::INFINITY, 0, 0);
        for j in 0..u.ncols() {
            for i in 0..u.nrows() {
                if u[(i, j)] < v {
                    v = u[(i, j)];
                    wi = i;
                    wj = j;
                }
            }
        }
        // measured = -min entry, bound = 0, slack = tolerance
        rep.record(
            -v,
            0.0,
            POSITIVITY_TOL,
            Witness {
                t: Some(t),
                s: Some(s),
                i: Some(wi),
                j: Some(wj),
                value: v,
            },
        );
    }
    Ok(rep)
}

/// Generator criteria for `L^inf`- and `L^1`-contractivity: the
/// logarithmic norms of `-A(t)` are nonpositive.
pub fn criterion_linf_l1(path: &OperatorPath, times: &[f64]) -> Result<[PropertyReport; 2]> {
    let space = path.space();
    let mut inf = PropertyReport::new("linf_contractivity_criterion");
    let mut one = PropertyReport::new("l1_contractivity_criterion");
    for &t in times {
        let a = -path.evaluate(t);
        let scale = a.amax().max(1.0);
        let mi = log_norm(space, &a, NormIndex::Inf)?;
        let m1 = log_norm(space, &a, NormIndex::One)?;
        inf.record(mi, 0.0, 1e-12 * scale, Witness { t: Some(t), value: mi, ..Default::default() });
        one.record(m1, 0.0, 1e-12 * scale, Witness { t: Some(t), value: m1, ..Default::default() });
    }
    Ok([inf, one])
}

/// `||U||_{inf->inf} <= 1` and `||U||_{1->1} <= 1` (weighted row and
/// column sums) up to `1e-9`.
pub fn check_linf_l1_contractivity(
    prop: &Propagator,
    pairs: &[(f64, f64)],
) -> Result<[PropertyReport; 2]> {
    let space = prop.path().space();
    let mats = evaluate_pairs(prop, pairs)?;
    let mut inf = PropertyReport::new("linf_contractivity");
    let mut one = PropertyReport::new("l1_contractivity");
    for (&(t, s), u) in pairs.iter().zip(&mats) {
        let ni = operator_norm(space, u, NormIndex::Inf, NormIndex::Inf)?;
        let n1 = operator_norm(space, u, NormIndex::One, NormIndex::One)?;
        inf.record(ni, 1.0, CONTRACTIVITY_TOL, pair_witness(t, s, ni));
        one.record(n1, 1.0, CONTRACTIVITY_TOL, pair_witness(t, s, n1));
    }
    Ok([inf, one])
}

fn weighted_column_sums(space: &DiscreteSpace, u: &DMatrix<f64>) -> Vec<f64> {
    let w = space.weights();
    (0..u.ncols())
        .map(|j| (0..u.nrows()).map(|i| w[i] * u[(i, j)]).sum::<f64>() / w[j])
        .collect()
}

/// Mass conservation: the criterion `1^T W A(t) = 0` on `times`, and the
/// conclusion `sum_i w_i U_ij / w_j = 1` on the pair grid. The details list
/// the extreme column sums, which also expose sub-stochastic families.
pub fn check_stochastic(
    prop: &Propagator,
    times: &[f64],
    pairs: &[(f64, f64)],
) -> Result<[PropertyReport; 2]> {
    let path = prop.path();
    let space = path.space();
    let mut crit = PropertyReport::new("stochastic_criterion");
    for &t in times {
        let a = path.evaluate(t);
        let scale = a.amax().max(1.0);
        let sums = weighted_column_sums(space, &a);
        let (j, v) = sums
            .iter()
            .enumerate()
            .map(|(j, v)| (j, v.abs()))
            .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        crit.record(
            v / scale,
            0.0,
            MASS_CRITERION_TOL,
            Witness { t: Some(t), j: Some(j), value: v, ..Default::default() },
        );
    }
    let mats = evaluate_pairs(prop, pairs)?;
    let mut conc = PropertyReport::new("stochastic");
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&(t, s), u) in pairs.iter().zip(&mats) {
        let sums = weighted_column_sums(space, u);
        for (j, &c) in sums.iter().enumerate() {
            lo = lo.min(c);
            hi = hi.max(c);
            conc.record(
                (c - 1.0).abs(),
                0.0,
                MASS_TOL,
                Witness { t: Some(t), s: Some(s), i: None, j: Some(j), value: c },
            );
        }
    }
    conc.detail("min_column_sum", lo);
    conc.detail("max_column_sum", hi);
    Ok([crit, conc])
}

/// Random test vectors: Gaussian, nonnegative, sparse spikes and smooth
/// modes in rotation, as complex vectors (imaginary part zero for the real
/// half of the sample).
fn sample_vector(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Complex<f64>> {
    let complex = k % 2 == 1;
    let mut re = vec![0.0; n];
    match (k / 2) % 4 {
        0 => re.iter_mut().for_each(|x| *x = rng.sample(StandardNormal)),
        1 => re.iter_mut().for_each(|x| *x = rng.gen::<f64>()),
        2 => {
            for _ in 0..1 + n / 16 {
                re[rng.gen_range(0..n)] = rng.sample(StandardNormal);
            }
        }
        _ => {
            let f: f64 = rng.gen_range(0.0..4.0);
            let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            re.iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = (f * std::f64::consts::PI * i as f64 / n as f64 + ph).cos());
        }
    }
    re.iter()
        .map(|&r| {
            let im = if complex { rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            Complex::new(r, im)
        })
        .collect()
}

fn apply_complex(u: &DMatrix<f64>, f: &[Complex<f64>]) -> Vec<Complex<f64>> {
    let n = u.nrows();
    let re = DVector::from_iterator(f.len(), f.iter().map(|z| z.re));
    let im = DVector::from_iterator(f.len(), f.iter().map(|z| z.im));
    let ur = u * re;
    let ui = u * im;
    (0..n).map(|i| Complex::new(ur[i], ui[i])).collect()
}

fn pair_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Monte-Carlo check of `||U(t,s) f||_p <= exp(int_s^t omega_p) ||f||_p`
/// with `samples` random real and complex `f` per pair.
pub fn check_lp_quasi_contractivity(
    prop: &Propagator,
    p: f64,
    omega_p: &ScalarProfile,
    pairs: &[(f64, f64)],
    samples: usize,
    seed: u64,
) -> Result<PropertyReport> {
    if !(p > 1.0) {
        return Err(Error::InvalidInput(format!("need p > 1, got {p}")));
    }
    let space = prop.path().space();
    let n = space.dim();
    let mats = evaluate_pairs(prop, pairs)?;
    let rows: Vec<Vec<(f64, f64)>> = mats
        .par_iter()
        .enumerate()
        .map(|(k, u)| {
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed, k));
            let mut out = Vec::with_capacity(samples);
            for m in 0..samples {
                let f = sample_vector(&mut rng, n, m);
                let nf = weighted_norm_complex(space, &f, p)?;
                if nf == 0.0 {
                    continue;
                }
                let uf = apply_complex(u, &f);
                out.push((weighted_norm_complex(space, &uf, p)? / nf, m as f64));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut rep = PropertyReport::new(&format!("lp_quasi_contractivity[p={p}]"));
    rep.seed = Some(seed);
    for (&(t, s), ratios) in pairs.iter().zip(rows) {
        let bound = omega_p.integral(s, t).exp();
        for (r, _) in ratios {
            rep.record(r, bound, LP_RELATIVE_TOL * bound, pair_witness(t, s, r));
        }
    }
    rep.detail("p", p);
    Ok(rep)
}

/// Linear `L^p` quasi-contractivity `omega_p = alpha1 + p alpha2` over a
/// sweep of exponents.
pub fn check_linear_quasi_contractivity(
    prop: &Propagator,
    alpha1: f64,
    alpha2: f64,
    ps: &[f64],
    pairs: &[(f64, f64)],
    samples: usize,
    seed: u64,
) -> Result<Vec<PropertyReport>> {
    let horizon = prop.path().horizon();
    ps.iter()
        .map(|&p| {
            let prof = ScalarProfile::constant(horizon, alpha1 + p * alpha2);
            let mut r = check_lp_quasi_contractivity(prop, p, &prof, pairs, samples, seed)?;
            r.property_name = format!("linear_lp_quasi_contractivity[p={p}]");
            Ok(r)
        })
        .collect()
}

/// `|U(t,s)| <= V(t,s)` entrywise and `|U f| <= V |f|` for random `f`.
///
/// `embedding[i]` is the index in the dominating space of node `i` of the
/// dominated space (extension by zero); `None` means identical spaces.
pub fn check_domination(
    dominated: &Propagator,
    dominating: &Propagator,
    embedding: Option<&[usize]>,
    pairs: &[(f64, f64)],
    seed: u64,
) -> Result<PropertyReport> {
    let n = dominated.dim();
    let m = dominating.dim();
    let emb: Vec<usize> = match embedding {
        Some(e) => e.to_vec(),
        None => (0..n).collect(),
    };
    if emb.len() != n || emb.iter().any(|&k| k >= m) || (embedding.is_none() && n != m) {
        return Err(Error::DimensionMismatch { expected: m, found: n });
    }
    let us = evaluate_pairs(dominated, pairs)?;
    let vs = evaluate_pairs(dominating, pairs)?;
    let mut rep = PropertyReport::new("domination");
    rep.seed = Some(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ((&(t, s), u), v) in pairs.iter().zip(&us).zip(&vs) {
        let vr = DMatrix::from_fn(n, n, |i, j| v[(emb[i], emb[j])]);
        let scale = vr.amax().max(1.0);
        for j in 0..n {
            for i in 0..n {
                let gap = u[(i, j)].abs() - vr[(i, j)];
                rep.record(
                    gap,
                    0.0,
                    DOMINATION_TOL,
                    Witness { t: Some(t), s: Some(s), i: Some(i), j: Some(j), value: gap },
                );
            }
        }
        for _ in 0..100 {
            let f = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let uf = u * &f;
            let vf = &vr * f.abs();
            for i in 0..n {
                let gap = uf[i].abs() - vf[i];
                rep.record(
                    gap,
                    0.0,
                    DOMINATION_TOL * scale * f.amax(),
                    Witness { t: Some(t), s: Some(s), i: Some(i), j: None, value: gap },
                );
            }
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumData {
    /// Kernel vector of `A(t)`, normalised in the pivot norm.
    pub u: Vec<f64>,
    /// Kernel vector of `A(t)^*`, scaled so that `(phi|u) = 1`.
    pub phi: Vec<f64>,
    #[serde(skip)]
    pub projector: DMatrix<f64>,
    /// Smallest eigenvalue of the Hermitian part of `A(t)` on `Ker P`.
    pub gap_profile: ScalarProfile,
    pub max_kernel_angle: f64,
}

#[derive(Debug, Clone)]
pub enum EquilibriumOutcome {
    Found(Box<EquilibriumData>),
    NotApplicable { kernel_dim: usize, reason: String },
}

fn flat_kernel(space: &DiscreteSpace, a: &DMatrix<f64>) -> (usize, Vec<f64>) {
    let flat = space.to_flat(a);
    let svd = flat.clone().svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let smax = svd.singular_values.max();
    let thresh = 1e-10 * smax.max(1e-300);
    let small: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= thresh)
        .collect();
    let idx = (0..svd.singular_values.len())
        .min_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]))
        .expect("non-empty");
    let x: Vec<f64> = vt.row(idx).iter().cloned().collect();
    // back to coordinates: A (D^{-1} x) = 0
    let w = space.weights();
    let v = x.iter().zip(w).map(|(xi, wi)| xi / wi.sqrt()).collect();
    (small.len(), v)
}

/// Angle between `x` and the kernel of `A` in the weighted metric.
fn kernel_angle(space: &DiscreteSpace, a: &DMatrix<f64>, x: &[f64]) -> f64 {
    let flat = space.to_flat(a);
    let w = space.weights();
    let xf = DVector::from_iterator(x.len(), x.iter().zip(w).map(|(xi, wi)| xi * wi.sqrt()));
    let svd = flat.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let smax = svd.singular_values.max();
    let mut row_space = 0.0;
    for i in 0..svd.singular_values.len() {
        if svd.singular_values[i] > 1e-10 * smax.max(1e-300) {
            row_space += vt.row(i).transpose().dot(&xf).powi(2);
        }
    }
    (row_space.sqrt() / xf.norm()).min(1.0).asin()
}

/// Common one-dimensional kernel of `A(t)` and `A(t)^*`, the projector
/// `P = phi (x) u` and the gap profile on `Ker P`.
pub fn equilibrium(path: &OperatorPath, samples: usize, grid: &[f64]) -> Result<EquilibriumOutcome> {
    let space = path.space();
    let avg = average_operator(path, 0.0, path.horizon())?;
    let (dim_u, u) = flat_kernel(space, &avg);
    let (dim_phi, phi) = flat_kernel(space, &space.adjoint(&avg));
    if dim_u != 1 || dim_phi != 1 {
        return Ok(EquilibriumOutcome::NotApplicable {
            kernel_dim: dim_u,
            reason: format!("kernel of the time-averaged generator has dimension {dim_u}"),
        });
    }
    let nu = weighted_norm(space, &u, 2.0)?;
    let mut u: Vec<f64> = u.iter().map(|x| x / nu).collect();
    if u.iter().sum::<f64>() < 0.0 {
        u.iter_mut().for_each(|x| *x = -*x);
    }
    let pair = space.inner(&phi, &u);
    if pair.abs() < 1e-12 {
        return Ok(EquilibriumOutcome::NotApplicable {
            kernel_dim: 1,
            reason: "kernel vectors of A and A* are orthogonal; no projector".into(),
        });
    }
    let phi: Vec<f64> = phi.iter().map(|x| x / pair).collect();
    let mut worst: f64 = 0.0;
    for &t in &path.sample_times(samples) {
        let a = path.evaluate(t);
        worst = worst
            .max(kernel_angle(space, &a, &u))
            .max(kernel_angle(space, &space.adjoint(&a), &phi));
    }
    if worst > KERNEL_ANGLE_TOL {
        return Ok(EquilibriumOutcome::NotApplicable {
            kernel_dim: 1,
            reason: format!("kernel varies in time (angle {worst:e} rad)"),
        });
    }
    let n = space.dim();
    let w = space.weights();
    let projector = DMatrix::from_fn(n, n, |i, j| u[i] * w[j] * phi[j]);
    let sp = space.clone();
    let phi2 = phi.clone();
    let gap_profile = ScalarProfile::from_path(path, grid, move |a| {
        Ok(spectral_summary(&sp, a, Some(&phi2))?
            .spectral_gap_on_complement
            .expect("kernel given"))
    })?;
    Ok(EquilibriumOutcome::Found(Box::new(EquilibriumData {
        u,
        phi,
        projector,
        gap_profile,
        max_kernel_angle: worst,
    })))
}

/// `||U(t, t0) - P|| <= ||I - P|| exp(-int_{t0}^t gap) + 1e-8`.
///
/// The factor `||I - P||` equals one for orthogonal projectors.
pub fn check_longtime(
    prop: &Propagator,
    eq: &EquilibriumData,
    t0: f64,
    times: &[f64],
) -> Result<PropertyReport> {
    let space = prop.path().space();
    let n = space.dim();
    let ip = DMatrix::<f64>::identity(n, n) - &eq.projector;
    let ip_norm = operator_norm(space, &ip, NormIndex::Two, NormIndex::Two)?;
    let ts: Vec<f64> = times.iter().cloned().filter(|&t| t >= t0).collect();
    let norms = ts
        .par_iter()
        .map(|&t| {
            let u = prop.evaluate(t, t0)?;
            operator_norm(space, &(u - &eq.projector), NormIndex::Two, NormIndex::Two)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rep = PropertyReport::new("longtime_convergence");
    for (&t, d) in ts.iter().zip(norms) {
        let bound = ip_norm * (-eq.gap_profile.integral(t0, t)).exp();
        rep.record(d, bound, LONGTIME_TOL, pair_witness(t, t0, d));
    }
    rep.detail("projector_complement_norm", ip_norm);
    Ok(rep)
}

/// Wrapper reporting not-applicable outcomes of [`equilibrium`].
pub fn check_longtime_outcome(
    prop: &Propagator,
    outcome: &EquilibriumOutcome,
    t0: f64,
    times: &[f64],
) -> Result<PropertyReport> {
    match outcome {
        EquilibriumOutcome::Found(eq) => check_longtime(prop, eq, t0, times),
        EquilibriumOutcome::NotApplicable { kernel_dim, reason } => {
            let mut r = PropertyReport::not_applicable(
                "longtime_convergence",
                format!("kernel dimension {kernel_dim}: {reason}"),
            );
            r.detail("kernel_dim", *kernel_dim as f64);
            Ok(r)
        }
    }
}

/// Uniform exponential stability beyond `t0`: with `Omega` the late running
/// average of `omega`, checks `||U(t,s)|| <= M exp((t - t0) Omega)` for
/// `s <= t0 <= t`, where `M = max_s ||U(t0,s)|| * max_t exp(int_{t0}^t omega - (t-t0) Omega)`.
pub fn check_uniform_exponential_stability(
    prop: &Propagator,
    omega: &ScalarProfile,
    t0: f64,
    nodes: usize,
) -> Result<PropertyReport> {
    let name = "uniform_exponential_stability";
    let (a, b) = (prop.partition().start(), prop.partition().end());
    if !(t0 >= a && t0 < b) {
        return Err(Error::InvalidInput(format!("t0 = {t0} outside [{a}, {b})")));
    }
    let windows = 8;
    let ends = grid(t0, b, windows + 1);
    let running: Vec<f64> = ends[1..]
        .iter()
        .map(|&t| omega.integral(t0, t) / (t - t0))
        .collect();
    let sign_consistent = running.iter().all(|&r| r < 0.0) || running.iter().all(|&r| r >= 0.0);
    if !sign_consistent {
        return Ok(PropertyReport::not_applicable(
            name,
            "running averages of omega change sign across windows",
        ));
    }
    let late = grid(t0 + 0.5 * (b - t0), b, 64);
    let big_omega = late
        .iter()
        .map(|&t| omega.integral(t0, t) / (t - t0))
        .sum::<f64>()
        / late.len() as f64;
    if big_omega >= 0.0 {
        let mut r = PropertyReport::not_applicable(name, "limsup of running averages is nonnegative");
        r.detail("omega_limsup", big_omega);
        return Ok(r);
    }
    let space = prop.path().space();
    let ss = grid(a, t0, nodes.max(2));
    let ts = grid(t0, b, nodes.max(2));
    let head = ss
        .iter()
        .map(|&s| operator_norm(space, &prop.evaluate(t0, s)?, NormIndex::Two, NormIndex::Two))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let fine = grid(t0, b, 16 * nodes.max(2));
    let drift = fine
        .iter()
        .map(|&t| omega.integral(t0, t) - (t - t0) * big_omega)
        .fold(0.0, f64::max)
        .exp();
    let m_bound = head * drift;
    let pairs: Vec<(f64, f64)> = ts.iter().flat_map(|&t| ss.iter().map(move |&s| (t, s))).collect();
    let mats = evaluate_pairs(prop, &pairs)?;
    let mut rep = PropertyReport::new(name);
    let mut fitted: f64 = 0.0;
    for (&(t, s), u) in pairs.iter().zip(&mats) {
        let nrm = operator_norm(space, u, NormIndex::Two, NormIndex::Two)?;
        let env = ((t - t0) * big_omega).exp();
        fitted = fitted.max(nrm / env);
        rep.record(nrm, m_bound * env, QUASI_CONTRACTIVITY_TOL, pair_witness(t, s, nrm));
    }
    rep.detail("omega_limsup", big_omega);
    rep.detail("m_bound", m_bound);
    rep.detail("m_fitted", fitted);
    Ok(rep)
}

//! Time-dependent operator paths `t -> A(t)` on `[0, T]`, their averages,
//! accretivity profiles and the derived paths (returned adjoint, rescaling,
//! Davies conjugation).

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hilbert::{generalized_eigenvalues, spectral_norm, spectral_summary, DiscreteSpace};
use crate::quadrature::integrate;

pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// Largest `|rho * psi|` accepted by [`davies_perturb`]; `exp(300)` is far
/// from overflow but beyond any useful conditioning.
pub const MAX_DAVIES_EXPONENT: f64 = 300.0;

const AVERAGE_TOL: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularity {
    /// Constant on each `[b_k, b_{k+1})`.
    PiecewiseConstant { breakpoints: Vec<f64> },
    /// Smooth between the listed kinks.
    Smooth { kinks: Vec<f64> },
    /// Samples held constant on `[t_k, t_{k+1})`.
    SampledGrid { times: Vec<f64> },
}

impl Regularity {
    pub fn breakpoints(&self) -> &[f64] {
        match self {
            Regularity::PiecewiseConstant { breakpoints } => breakpoints,
            Regularity::Smooth { kinks } => kinks,
            Regularity::SampledGrid { times } => times,
        }
    }

    pub fn is_piecewise_constant(&self) -> bool {
        !matches!(self, Regularity::Smooth { .. })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DeclaredConstants {
    pub m: Option<f64>,
    pub alpha: Option<f64>,
    pub omega: Option<f64>,
}

#[derive(Clone)]
pub struct OperatorPath {
    space: DiscreteSpace,
    horizon: f64,
    eval: MatrixFn,
    regularity: Regularity,
    declared: DeclaredConstants,
}

impl fmt::Debug for OperatorPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorPath")
            .field("dim", &self.space.dim())
            .field("horizon", &self.horizon)
            .field("regularity", &self.regularity)
            .field("declared", &self.declared)
            .finish()
    }
}

fn clean_breaks(mut b: Vec<f64>, horizon: f64) -> Result<Vec<f64>> {
    if b.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("breakpoints must be finite".into()));
    }
    b.retain(|&x| x > 0.0 && x < horizon);
    b.sort_by(f64::total_cmp);
    b.dedup();
    Ok(b)
}

impl OperatorPath {
    pub fn new(
        space: DiscreteSpace,
        horizon: f64,
        eval: MatrixFn,
        regularity: Regularity,
    ) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        let regularity = match regularity {
            Regularity::PiecewiseConstant { breakpoints } => Regularity::PiecewiseConstant {
                breakpoints: clean_breaks(breakpoints, horizon)?,
            },
            Regularity::Smooth { kinks } => Regularity::Smooth {
                kinks: clean_breaks(kinks, horizon)?,
            },
            Regularity::SampledGrid { times } => Regularity::SampledGrid { times },
        };
        let probe = eval(0.0);
        if probe.nrows() != space.dim() || probe.ncols() != space.dim() {
            return Err(Error::DimensionMismatch {
                expected: space.dim(),
                found: probe.nrows(),
            });
        }
        Ok(Self {
            space,
            horizon,
            eval,
            regularity,
            declared: DeclaredConstants::default(),
        })
    }

    pub fn constant(space: DiscreteSpace, horizon: f64, a: DMatrix<f64>) -> Result<Self> {
        Self::new(
            space,
            horizon,
            Arc::new(move |_| a.clone()),
            Regularity::PiecewiseConstant { breakpoints: vec![] },
        )
    }

    /// `A(t) = pieces[k]` on `[breaks[k], breaks[k+1])` with `breaks[0] = 0`
    /// implied; `breaks` lists the interior switching times.
    pub fn piecewise_constant(
        space: DiscreteSpace,
        horizon: f64,
        breaks: Vec<f64>,
        pieces: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if pieces.len() != breaks.len() + 1 {
            return Err(Error::InvalidInput(format!(
                "{} interior breakpoints need {} pieces, got {}",
                breaks.len(),
                breaks.len() + 1,
                pieces.len()
            )));
        }
        if breaks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("breakpoints must be strictly increasing".into()));
        }
        let b = breaks.clone();
        let eval: MatrixFn = Arc::new(move |t| {
            let k = b.partition_point(|&x| x <= t);
            pieces[k].clone()
        });
        Self::new(space, horizon, eval, Regularity::PiecewiseConstant { breakpoints: breaks })
    }

    /// Sampled matrices held constant on `[t_k, t_{k+1})`; the last sample
    /// holds up to the horizon.
    pub fn sampled(
        space: DiscreteSpace,
        horizon: f64,
        times: Vec<f64>,
        samples: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if times.is_empty() || times.len() != samples.len() {
            return Err(Error::InvalidInput(
                "sampled path needs one matrix per sample time".into(),
            ));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("sample times must be strictly increasing".into()));
        }
        if times[0] > 0.0 {
            return Err(Error::InvalidInput("first sample time must be <= 0".into()));
        }
        let t2 = times.clone();
        let eval: MatrixFn = Arc::new(move |t| {
            let k = t2.partition_point(|&x| x <= t).saturating_sub(1);
            samples[k].clone()
        });
        let interior = times.iter().cloned().filter(|&t| t > 0.0 && t < horizon).collect();
        Self::new(space, horizon, eval, Regularity::SampledGrid { times: interior })
    }

    /// Loads a sampled path from CSV rows `t, a_11, a_12, ..., a_nn`
    /// (row-major). A non-numeric first row is treated as a header.
    pub fn from_csv(space: DiscreteSpace, horizon: f64, path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let n = space.dim();
        let mut times = Vec::new();
        let mut mats = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            let vals = match vals {
                Ok(v) => v,
                Err(_) if line == 0 => continue,
                Err(e) => {
                    return Err(Error::InvalidInput(format!("line {}: {e}", line + 1)));
                }
            };
            if vals.len() != 1 + n * n {
                return Err(Error::InvalidInput(format!(
                    "line {}: expected {} fields, found {}",
                    line + 1,
                    1 + n * n,
                    vals.len()
                )));
            }
            times.push(vals[0]);
            mats.push(DMatrix::from_row_slice(n, n, &vals[1..]));
        }
        Self::sampled(space, horizon, times, mats)
    }

    pub fn with_declared(mut self, declared: DeclaredConstants) -> Self {
        self.declared = declared;
        self
    }

    pub fn space(&self) -> &DiscreteSpace {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn regularity(&self) -> &Regularity {
        &self.regularity
    }

    pub fn declared(&self) -> DeclaredConstants {
        self.declared
    }

    /// Interior breakpoints of the path in `(0, T)`.
    pub fn breakpoints(&self) -> &[f64] {
        self.regularity.breakpoints()
    }

    pub fn evaluate(&self, t: f64) -> DMatrix<f64> {
        (self.eval)(t)
    }

    pub(crate) fn eval_fn(&self) -> MatrixFn {
        self.eval.clone()
    }

    fn derived(&self, eval: MatrixFn, regularity: Regularity, declared: DeclaredConstants) -> Self {
        Self {
            space: self.space.clone(),
            horizon: self.horizon,
            eval,
            regularity,
            declared,
        }
    }

    /// Sample times covering every piece of the path plus a uniform grid of
    /// `samples` points.
    pub fn sample_times(&self, samples: usize) -> Vec<f64> {
        let mut nodes: Vec<f64> = vec![0.0, self.horizon];
        nodes.extend_from_slice(self.breakpoints());
        let k = samples.max(2);
        nodes.extend((0..k).map(|i| self.horizon * i as f64 / (k - 1) as f64));
        nodes.sort_by(f64::total_cmp);
        nodes.dedup();
        let mut out = Vec::with_capacity(2 * nodes.len());
        for w in nodes.windows(2) {
            out.push(0.5 * (w[0] + w[1]));
            if !self.regularity.is_piecewise_constant() {
                out.push(w[0]);
            }
        }
        if !self.regularity.is_piecewise_constant() {
            out.push(self.horizon);
        }
        out
    }
}

/// `(1/(b-a)) * int_a^b A(r) dr`; exact for piecewise-constant paths and
/// adaptive Gauss-Kronrod (`1e-11` per entry) otherwise.
pub fn average_operator(path: &OperatorPath, a: f64, b: f64) -> Result<DMatrix<f64>> {
    if !(a < b) {
        return Err(Error::InvalidInput(format!("average needs a < b, got [{a}, {b}]")));
    }
    let mut nodes = vec![a];
    nodes.extend(path.breakpoints().iter().cloned().filter(|&x| x > a && x < b));
    nodes.push(b);
    let n = path.dim();
    let mut sum = DMatrix::<f64>::zeros(n, n);
    let len = b - a;
    for w in nodes.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if path.regularity.is_piecewise_constant() {
            sum += path.evaluate(0.5 * (lo + hi)) * (hi - lo);
        } else {
            let f = path.eval_fn();
            sum += integrate(|t| f(t), lo, hi, AVERAGE_TOL * (hi - lo))?;
        }
    }
    Ok(sum / len)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FormConstants {
    /// Boundedness constant in the energy norm.
    pub m: f64,
    pub alpha: f64,
    /// Shift making the form coercive with constant `alpha`.
    pub omega: f64,
    /// Smallest nonnegative shift making the form accretive.
    pub omega_accretive: f64,
    /// True when the space has no energy metric and the pivot metric was used.
    pub v_metric_fallback: bool,
    pub samples: usize,
}

/// Sampled estimates of the form constants `(M, alpha, omega)`.
///
/// If the path declares `alpha`, the smallest `omega` compatible with it is
/// returned; otherwise `omega` is the accretivity shift with a 1% margin,
/// plus one unit when that shift alone leaves the form degenerate.
pub fn estimate_form_constants(path: &OperatorPath, samples: usize) -> Result<FormConstants> {
    let space = path.space();
    let w = space.weight_matrix();
    let g = space.v_gram();
    let fallback = space.v_metric().is_none();
    let times = path.sample_times(samples);
    let mut sym_forms = Vec::with_capacity(times.len());
    let mut m: f64 = 0.0;
    let mut omega_acc: f64 = 0.0;
    let chol = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("energy metric not positive definite".into()))?;
    let linv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("energy metric singular".into()))?;
    for &t in &times {
        let a = path.evaluate(t);
        let form = &w * &a;
        m = m.max(spectral_norm(&(&linv * &form * linv.transpose())));
        omega_acc = omega_acc.max(spectral_summary(space, &(-&a), None)?.max_sym_eigen);
        sym_forms.push((&form + form.transpose()) * 0.5);
    }
    let alpha_at = |omega: f64| -> Result<f64> {
        let mut alpha = f64::INFINITY;
        for s in &sym_forms {
            let ev = generalized_eigenvalues(&(s + &w * omega), &g)?;
            alpha = alpha.min(ev.iter().cloned().fold(f64::INFINITY, f64::min));
        }
        Ok(alpha)
    };
    let (alpha, omega) = match path.declared().alpha {
        Some(alpha) => {
            let mut omega: f64 = 0.0;
            for s in &sym_forms {
                let ev = generalized_eigenvalues(&(&g * alpha - s), &w)?;
                omega = omega.max(ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            }
            (alpha, omega + 0.01 * omega.abs())
        }
        None => {
            let mut omega = omega_acc + 0.01 * omega_acc.abs();
            let mut alpha = alpha_at(omega)?;
            if alpha <= 1e-9 * m.max(1.0) {
                omega += 1.0;
                alpha = alpha_at(omega)?;
            }
            (0.99 * alpha, omega)
        }
    };
    if !(alpha > 0.0) {
        return Err(Error::EllipticityLost(format!("estimated alpha = {alpha:e}")));
    }
    Ok(FormConstants {
        m: 1.01 * m,
        alpha,
        omega,
        omega_accretive: omega_acc,
        v_metric_fallback: fallback,
        samples: times.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileRule {
    /// `values[k]` holds on `[nodes[k], nodes[k+1])`.
    PiecewiseConstant,
    /// Linear interpolation between node values.
    Trapezoid,
    /// Quadratic interpolation on panels `nodes[2k..=2k+2]` with midpoint
    /// `nodes[2k+1]`.
    Quadratic,
}

/// Per-unit-length tolerance, relative to the largest sampled value, of the
/// Simpson refinement used for smooth profiles.
const PROFILE_TOL: f64 = 1e-12;
const MAX_PROFILE_PANELS: usize = 1 << 18;
const SEED_PANELS: usize = 128;

/// A scalar function of time sampled on a grid, with an exact integral for
/// its interpolant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarProfile {
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
    pub rule: ProfileRule,
}

impl ScalarProfile {
    /// Samples `f(A(t))` on `grid` plus the path breakpoints.
    pub fn from_path(
        path: &OperatorPath,
        grid: &[f64],
        f: impl Fn(&DMatrix<f64>) -> Result<f64> + Sync,
    ) -> Result<Self> {
        use rayon::prelude::*;
        let mut nodes: Vec<f64> = grid
            .iter()
            .cloned()
            .filter(|&t| t >= 0.0 && t <= path.horizon())
            .collect();
        nodes.extend_from_slice(&[0.0, path.horizon()]);
        nodes.extend_from_slice(path.breakpoints());
        nodes.sort_by(f64::total_cmp);
        nodes.dedup();
        if path.regularity().is_piecewise_constant() {
            let values = nodes
                .par_windows(2)
                .map(|w| f(&path.evaluate(0.5 * (w[0] + w[1]))))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                nodes,
                values,
                rule: ProfileRule::PiecewiseConstant,
            })
        } else {
            let eval = |t: f64| f(&path.evaluate(t));
            // uniform seed panels guard the refinement test against aliasing
            let horizon = path.horizon();
            nodes.extend((1..SEED_PANELS).map(|k| horizon * k as f64 / SEED_PANELS as f64));
            nodes.sort_by(f64::total_cmp);
            nodes.dedup();
            let min_width = path.horizon() * 2f64.powi(-24);
            // panels (a, m, b) with values, refined until Simpson on the panel
            // agrees with Simpson on its halves
            let mut pending: Vec<[(f64, f64); 3]> = nodes
                .par_windows(2)
                .map(|w| {
                    let m = 0.5 * (w[0] + w[1]);
                    Ok([(w[0], eval(w[0])?), (m, eval(m)?), (w[1], eval(w[1])?)])
                })
                .collect::<Result<_>>()?;
            let scale = pending
                .iter()
                .flat_map(|p| p.iter().map(|x| x.1.abs()))
                .fold(1.0, f64::max);
            let mut done: Vec<[(f64, f64); 3]> = Vec::new();
            while !pending.is_empty() {
                if done.len() + pending.len() > MAX_PROFILE_PANELS {
                    return Err(Error::QuadratureNonConvergence {
                        worst: pending.iter().take(8).map(|p| (p[0].0, p[2].0)).collect(),
                    });
                }
                let split = pending
                    .par_iter()
                    .map(|&[a, m, b]| {
                        let (q1, q3) = (0.5 * (a.0 + m.0), 0.5 * (m.0 + b.0));
                        let (v1, v3) = (eval(q1)?, eval(q3)?);
                        let w = b.0 - a.0;
                        let whole = w / 6.0 * (a.1 + 4.0 * m.1 + b.1);
                        let halves = w / 12.0 * (a.1 + 4.0 * v1 + 2.0 * m.1 + 4.0 * v3 + b.1);
                        let fine = (whole - halves).abs() <= PROFILE_TOL * scale * w || w <= min_width;
                        Ok(([a, (q1, v1), m], [m, (q3, v3), b], fine))
                    })
                    .collect::<Result<Vec<_>>>()?;
                pending = Vec::new();
                for (left, right, fine) in split {
                    if fine {
                        done.push(left);
                        done.push(right);
                    } else {
                        pending.push(left);
                        pending.push(right);
                    }
                }
            }
            done.sort_by(|x, y| x[0].0.total_cmp(&y[0].0));
            let mut nodes = vec![done[0][0].0];
            let mut values = vec![done[0][0].1];
            for p in &done {
                nodes.extend([p[1].0, p[2].0]);
                values.extend([p[1].1, p[2].1]);
            }
            Ok(Self {
                nodes,
                values,
                rule: ProfileRule::Quadratic,
            })
        }
    }

    pub fn constant(horizon: f64, value: f64) -> Self {
        Self {
            nodes: vec![0.0, horizon],
            values: vec![value],
            rule: ProfileRule::PiecewiseConstant,
        }
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let k = self.nodes.partition_point(|&x| x <= t);
        match self.rule {
            ProfileRule::PiecewiseConstant => {
                self.values[k.saturating_sub(1).min(self.values.len() - 1)]
            }
            ProfileRule::Trapezoid => {
                if k == 0 {
                    return self.values[0];
                }
                if k >= self.nodes.len() {
                    return *self.values.last().expect("non-empty");
                }
                let (x0, x1) = (self.nodes[k - 1], self.nodes[k]);
                let th = (t - x0) / (x1 - x0);
                self.values[k - 1] * (1.0 - th) + self.values[k] * th
            }
            ProfileRule::Quadratic => {
                let panels = (self.nodes.len() - 1) / 2;
                let p = (k.saturating_sub(1) / 2).min(panels - 1);
                let (c, h) = self.panel(p);
                let u = ((t - c) / h).clamp(-1.0, 1.0);
                let [va, vm, vb] = self.panel_values(p);
                vm + 0.5 * u * (vb - va) + 0.5 * u * u * (va - 2.0 * vm + vb)
            }
        }
    }

    /// Centre and half-width of quadratic panel `p`.
    fn panel(&self, p: usize) -> (f64, f64) {
        (self.nodes[2 * p + 1], 0.5 * (self.nodes[2 * p + 2] - self.nodes[2 * p]))
    }

    fn panel_values(&self, p: usize) -> [f64; 3] {
        [self.values[2 * p], self.values[2 * p + 1], self.values[2 * p + 2]]
    }

    /// `int_s^t` of the interpolant (negative when `t < s`).
    pub fn integral(&self, s: f64, t: f64) -> f64 {
        if t < s {
            return -self.integral(t, s);
        }
        let mut total = 0.0;
        if self.rule == ProfileRule::Quadratic {
            for p in 0..(self.nodes.len() - 1) / 2 {
                let (c, h) = self.panel(p);
                let lo = s.max(c - h);
                let hi = t.min(c + h);
                if hi <= lo {
                    continue;
                }
                let [va, vm, vb] = self.panel_values(p);
                let prim = |u: f64| vm * u + 0.25 * (vb - va) * u * u + (va - 2.0 * vm + vb) * u * u * u / 6.0;
                total += h * (prim((hi - c) / h) - prim((lo - c) / h));
            }
            return total;
        }
        for k in 0..self.nodes.len() - 1 {
            let (x0, x1) = (self.nodes[k], self.nodes[k + 1]);
            let lo = s.max(x0);
            let hi = t.min(x1);
            if hi <= lo {
                continue;
            }
            total += match self.rule {
                ProfileRule::PiecewiseConstant => self.values[k] * (hi - lo),
                ProfileRule::Trapezoid => 0.5 * (self.value_at(lo) + self.value_at(hi)) * (hi - lo),
                ProfileRule::Quadratic => unreachable!(),
            };
        }
        total
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `omega(t)`: the largest eigenvalue of `-(A(t) + A(t)^*)/2`, i.e. the
/// smallest shift making `A(t)` accretive at time `t`.
pub fn omega_profile(path: &OperatorPath, grid: &[f64]) -> Result<ScalarProfile> {
    let space = path.space().clone();
    ScalarProfile::from_path(path, grid, move |a| {
        Ok(spectral_summary(&space, &(-a), None)?.max_sym_eigen)
    })
}

/// The path `t -> A^*(T - t)` with the weighted adjoint; breakpoints reflect
/// about `T/2`.
pub fn returned_adjoint(path: &OperatorPath) -> OperatorPath {
    let horizon = path.horizon();
    let f = path.eval_fn();
    let space = path.space().clone();
    let eval: MatrixFn = Arc::new(move |t| space.adjoint(&f(horizon - t)));
    let mut reflected: Vec<f64> = path.breakpoints().iter().map(|b| horizon - b).collect();
    reflected.reverse();
    let regularity = match path.regularity() {
        Regularity::Smooth { .. } => Regularity::Smooth { kinks: reflected },
        _ => Regularity::PiecewiseConstant {
            breakpoints: reflected,
        },
    };
    path.derived(eval, regularity, path.declared())
}

/// The path `A(t) + omega I`, whose propagator is `exp(-omega (t-s)) U(t,s)`.
pub fn rescaled(path: &OperatorPath, omega: f64) -> OperatorPath {
    let f = path.eval_fn();
    let eval: MatrixFn = Arc::new(move |t| {
        let mut a = f(t);
        for i in 0..a.nrows() {
            a[(i, i)] += omega;
        }
        a
    });
    let mut declared = path.declared();
    declared.omega = declared.omega.map(|w| (w - omega).max(0.0));
    path.derived(eval, path.regularity().clone(), declared)
}

/// Lipschitz weight for Davies' exponential conjugation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DaviesWeight {
    pub label: String,
    pub psi: Vec<f64>,
    pub lipschitz_certificate: f64,
    /// Largest absolute second divided difference away from isolated kinks.
    pub second_diff_certificate: f64,
    pub kinks: usize,
}

impl DaviesWeight {
    /// Weight on a one-dimensional grid with increasing positions.
    pub fn on_line(label: impl Into<String>, coords: &[f64], psi: Vec<f64>) -> Result<Self> {
        if coords.len() != psi.len() {
            return Err(Error::DimensionMismatch {
                expected: coords.len(),
                found: psi.len(),
            });
        }
        if coords.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("grid positions must increase".into()));
        }
        let slopes: Vec<f64> = (1..psi.len())
            .map(|i| (psi[i] - psi[i - 1]) / (coords[i] - coords[i - 1]))
            .collect();
        let lip = slopes.iter().map(|s| s.abs()).fold(0.0, f64::max);
        let mut kink_nodes = Vec::new();
        let mut second: f64 = 0.0;
        for i in 1..slopes.len() {
            let span = 0.5 * (coords[i + 1] - coords[i - 1]);
            let d2 = (slopes[i] - slopes[i - 1]).abs() / span;
            if d2 > 1.0 {
                kink_nodes.push(i);
            } else {
                second = second.max(d2);
            }
        }
        if kink_nodes.windows(2).any(|w| w[1] == w[0] + 1) {
            return Err(Error::InvalidInput(
                "weight has adjacent kinks; second differences are not bounded".into(),
            ));
        }
        Self::checked(label.into(), psi, lip, second, kink_nodes.len())
    }

    /// Weight on a graph with unit edge lengths; second differences are
    /// taken along every path `u - v - x` of two edges.
    pub fn on_graph(label: impl Into<String>, edges: &[(usize, usize)], psi: Vec<f64>) -> Result<Self> {
        let n = psi.len();
        let mut nbrs = vec![Vec::new(); n];
        let mut lip: f64 = 0.0;
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidInput(format!("edge ({a}, {b}) out of range")));
            }
            lip = lip.max((psi[a] - psi[b]).abs());
            nbrs[a].push(b);
            nbrs[b].push(a);
        }
        let mut second: f64 = 0.0;
        let mut kinks = 0;
        for v in 0..n {
            let mut kinked = false;
            for (i, &a) in nbrs[v].iter().enumerate() {
                for &b in &nbrs[v][i + 1..] {
                    let d2 = (psi[a] - 2.0 * psi[v] + psi[b]).abs();
                    if d2 > 1.0 {
                        kinked = true;
                    } else {
                        second = second.max(d2);
                    }
                }
            }
            kinks += kinked as usize;
        }
        Self::checked(label.into(), psi, lip, second, kinks)
    }

    fn checked(label: String, psi: Vec<f64>, lip: f64, second: f64, kinks: usize) -> Result<Self> {
        if psi.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("weight must be finite".into()));
        }
        if lip > 1.0 + 1e-12 {
            return Err(Error::InvalidInput(format!(
                "weight {label} has Lipschitz constant {lip} > 1"
            )));
        }
        Ok(Self {
            label,
            psi,
            lipschitz_certificate: lip,
            second_diff_certificate: second,
            kinks,
        })
    }

    /// `psi = sign * (x - origin)` and clipped distances
    /// `min(|x - c|, radius)` for each centre.
    pub fn standard_line_family(coords: &[f64], centres: &[f64], radius: f64) -> Result<Vec<Self>> {
        let x0 = coords.first().cloned().unwrap_or(0.0);
        let mut fam = vec![
            Self::on_line("x", coords, coords.iter().map(|x| x - x0).collect())?,
            Self::on_line("-x", coords, coords.iter().map(|x| x0 - x).collect())?,
        ];
        for &c in centres {
            let psi = coords.iter().map(|x| (x - c).abs().min(radius)).collect();
            fam.push(Self::on_line(format!("dist({c})"), coords, psi)?);
        }
        Ok(fam)
    }
}

/// The path `M^{-1} A(t) M` with `M = diag(exp(-rho psi))`.
pub fn davies_perturb(path: &OperatorPath, weight: &DaviesWeight, rho: f64) -> Result<OperatorPath> {
    if weight.psi.len() != path.dim() {
        return Err(Error::DimensionMismatch {
            expected: path.dim(),
            found: weight.psi.len(),
        });
    }
    let worst = weight.psi.iter().map(|p| (rho * p).abs()).fold(0.0, f64::max);
    if !(worst <= MAX_DAVIES_EXPONENT) {
        return Err(Error::Overflow(format!(
            "|rho psi| = {worst:e} exceeds {MAX_DAVIES_EXPONENT}"
        )));
    }
    let f = path.eval_fn();
    let psi = weight.psi.clone();
    let eval: MatrixFn = Arc::new(move |t| {
        let mut a = f(t);
        conjugate_in_place(&mut a, &psi, rho);
        a
    });
    Ok(path.derived(eval, path.regularity().clone(), DeclaredConstants::default()))
}

/// `a_ij <- a_ij exp(rho (psi_i - psi_j))`.
pub fn conjugate_in_place(a: &mut DMatrix<f64>, psi: &[f64], rho: f64) {
    let n = a.nrows();
    for j in 0..n {
        for i in 0..n {
            if a[(i, j)] != 0.0 {
                a[(i, j)] *= (rho * (psi[i] - psi[j])).exp();
            }
        }
    }
}

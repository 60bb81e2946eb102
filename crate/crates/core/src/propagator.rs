//! Product-integral propagators over partitions of `[0, T]`, dyadic
//! refinement to a tolerance, and an adaptive Runge-Kutta reference solver.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forms::{average_operator, OperatorPath};
use crate::hilbert::{matrix_exponential, operator_norm, NormIndex};

/// Hard cap on the number of subintervals reached by dyadic refinement.
pub const MAX_SUBINTERVALS: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Partition {
    points: Vec<f64>,
}

impl Partition {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidInput("partition needs at least two points".into()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("partition points must be finite".into()));
        }
        if let Some(i) = points.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!(
                "partition not strictly increasing at index {}",
                i + 1
            )));
        }
        Ok(Self { points })
    }

    pub fn uniform(a: f64, b: f64, pieces: usize) -> Result<Self> {
        let k = pieces.max(1);
        let mut pts: Vec<f64> = (0..=k).map(|i| a + (b - a) * i as f64 / k as f64).collect();
        pts[k] = b;
        Self::new(pts)
    }

    /// `{s, t}` together with the path breakpoints strictly inside `(s, t)`.
    pub fn aligned(path: &OperatorPath, s: f64, t: f64) -> Result<Self> {
        let mut pts = vec![s];
        pts.extend(path.breakpoints().iter().cloned().filter(|&b| b > s && b < t));
        pts.push(t);
        Self::new(pts)
    }

    /// Union of an aligned partition with extra points, each gap then split
    /// into `pieces` equal parts.
    pub fn aligned_with(path: &OperatorPath, extra: &[f64], pieces: usize) -> Result<Self> {
        let mut pts = vec![0.0, path.horizon()];
        pts.extend_from_slice(path.breakpoints());
        pts.extend(extra.iter().cloned().filter(|&x| x >= 0.0 && x <= path.horizon()));
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        let mut out = Vec::new();
        for w in pts.windows(2) {
            for i in 0..pieces.max(1) {
                out.push(w[0] + (w[1] - w[0]) * i as f64 / pieces.max(1) as f64);
            }
        }
        out.push(*pts.last().expect("non-empty"));
        Self::new(out)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn subintervals(&self) -> usize {
        self.points.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        *self.points.last().expect("non-empty")
    }

    pub fn mesh(&self) -> f64 {
        self.points.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// Splits every subinterval at its midpoint.
    pub fn refine(&self) -> Self {
        let mut pts = Vec::with_capacity(2 * self.points.len());
        for w in self.points.windows(2) {
            pts.push(w[0]);
            pts.push(0.5 * (w[0] + w[1]));
        }
        pts.push(self.end());
        Self { points: pts }
    }

    /// The partition `{T - lambda}` of `[T - end, T - start]`.
    pub fn reflect(&self, horizon: f64) -> Self {
        Self {
            points: self.points.iter().rev().map(|p| horizon - p).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementStep {
    pub subintervals: usize,
    pub mesh: f64,
    /// Weighted spectral norm of the change from the previous level.
    pub difference: Option<f64>,
}

pub struct Propagator {
    path: OperatorPath,
    partition: Partition,
    averaged: Vec<DMatrix<f64>>,
    segment_exponentials: Vec<DMatrix<f64>>,
    refinement_history: Vec<RefinementStep>,
    converged: bool,
    tolerance: Option<f64>,
    products: Mutex<HashMap<(usize, usize), Arc<DMatrix<f64>>>>,
}

impl std::fmt::Debug for Propagator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Propagator")
            .field("dim", &self.path.dim())
            .field("subintervals", &self.partition.subintervals())
            .field("converged", &self.converged)
            .field("tolerance", &self.tolerance)
            .finish()
    }
}

/// Averages the path over each subinterval and exponentiates, in parallel.
pub fn assemble(path: &OperatorPath, partition: &Partition) -> Result<Propagator> {
    let pts = partition.points();
    if pts[0] < -1e-12 || partition.end() > path.horizon() * (1.0 + 1e-12) + 1e-12 {
        return Err(Error::InvalidInput(format!(
            "partition [{}, {}] leaves the horizon [0, {}]",
            pts[0],
            partition.end(),
            path.horizon()
        )));
    }
    let pairs: Vec<(DMatrix<f64>, DMatrix<f64>)> = pts
        .par_windows(2)
        .map(|w| {
            let avg = average_operator(path, w[0], w[1])?;
            let e = matrix_exponential(&avg, w[1] - w[0])?;
            Ok((avg, e))
        })
        .collect::<Result<_>>()?;
    let (averaged, segment_exponentials) = pairs.into_iter().unzip();
    Ok(Propagator {
        path: path.clone(),
        partition: partition.clone(),
        averaged,
        segment_exponentials,
        refinement_history: vec![RefinementStep {
            subintervals: partition.subintervals(),
            mesh: partition.mesh(),
            difference: None,
        }],
        converged: true,
        tolerance: None,
        products: Mutex::new(HashMap::new()),
    })
}

impl Propagator {
    pub fn path(&self) -> &OperatorPath {
        &self.path
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn averaged(&self) -> &[DMatrix<f64>] {
        &self.averaged
    }

    pub fn segment_exponentials(&self) -> &[DMatrix<f64>] {
        &self.segment_exponentials
    }

    pub fn refinement_history(&self) -> &[RefinementStep] {
        &self.refinement_history
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn tolerance(&self) -> Option<f64> {
        self.tolerance
    }

    pub fn dim(&self) -> usize {
        self.path.dim()
    }

    /// `U(t, s)` for `start <= s <= t <= end`; partial subintervals use the
    /// average over the whole subinterval.
    pub fn evaluate(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        let (a, b) = (self.partition.start(), self.partition.end());
        let slack = 1e-12 * (b - a).abs().max(1.0);
        if !(s <= t && s >= a - slack && t <= b + slack) {
            return Err(Error::InvalidInput(format!(
                "need {a} <= s <= t <= {b}, got s = {s}, t = {t}"
            )));
        }
        let n = self.dim();
        if s == t {
            return Ok(DMatrix::identity(n, n));
        }
        let s = s.clamp(a, b);
        let t = t.clamp(a, b);
        let pts = self.partition.points();
        let nseg = self.partition.subintervals();
        // segment holding s in [l_k, l_{k+1}) and t in (l_k, l_{k+1}]
        let ks = pts.partition_point(|&x| x <= s).saturating_sub(1).min(nseg - 1);
        let kt = pts.partition_point(|&x| x < t).saturating_sub(1).min(nseg - 1);
        if ks == kt {
            return self.factor(ks, s, t);
        }
        let first = self.factor(ks, s, pts[ks + 1])?;
        let last = self.factor(kt, pts[kt], t)?;
        let mut u = if kt > ks + 1 {
            let mid = self.full_product(ks + 1, kt);
            &*mid * first
        } else {
            first
        };
        u = last * u;
        Ok(u)
    }

    fn factor(&self, k: usize, from: f64, to: f64) -> Result<DMatrix<f64>> {
        let pts = self.partition.points();
        if from == pts[k] && to == pts[k + 1] {
            return Ok(self.segment_exponentials[k].clone());
        }
        matrix_exponential(&self.averaged[k], to - from)
    }

    /// `E_{hi-1} ... E_{lo}` for full segments, memoised.
    fn full_product(&self, lo: usize, hi: usize) -> Arc<DMatrix<f64>> {
        if let Some(p) = self.products.lock().expect("cache lock").get(&(lo, hi)) {
            return p.clone();
        }
        let mut p = self.segment_exponentials[lo].clone();
        for k in lo + 1..hi {
            p = &self.segment_exponentials[k] * p;
        }
        let p = Arc::new(p);
        self.products
            .lock()
            .expect("cache lock")
            .insert((lo, hi), p.clone());
        p
    }

    /// Writes `partition.csv`, `pairs.csv` and one `U_<k>.csv` per pair.
    pub fn export_csv(&self, dir: &Path, pairs: &[(f64, f64)]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("partition.csv"))?;
        w.write_record(["index", "lambda"])?;
        for (i, p) in self.partition.points().iter().enumerate() {
            w.write_record([i.to_string(), p.to_string()])?;
        }
        w.flush()?;
        let mut idx = csv::Writer::from_path(dir.join("pairs.csv"))?;
        idx.write_record(["k", "t", "s", "file"])?;
        for (k, &(t, s)) in pairs.iter().enumerate() {
            let u = self.evaluate(t, s)?;
            let name = format!("U_{k}.csv");
            let mut m = csv::Writer::from_path(dir.join(&name))?;
            for i in 0..u.nrows() {
                m.write_record(u.row(i).iter().map(|v| v.to_string()))?;
            }
            m.flush()?;
            idx.write_record([k.to_string(), t.to_string(), s.to_string(), name])?;
        }
        idx.flush()?;
        Ok(())
    }
}

fn difference_norm(path: &OperatorPath, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    operator_norm(path.space(), &(a - b), NormIndex::Two, NormIndex::Two)
}

/// Dyadic refinement of the partition until `U(t, s)` changes by at most
/// `tol` on two consecutive refinements (one for piecewise-constant paths,
/// whose aligned partition is already exact).
pub fn propagate_to_tolerance(path: &OperatorPath, s: f64, t: f64, tol: f64) -> Result<Propagator> {
    propagate_to_tolerance_aligned(path, s, t, tol, &[])
}

/// As [`propagate_to_tolerance`], with `nodes` inserted into the initial
/// partition; convergence is then monitored for `U(node, s)` at every node.
pub fn propagate_to_tolerance_aligned(
    path: &OperatorPath,
    s: f64,
    t: f64,
    tol: f64,
    nodes: &[f64],
) -> Result<Propagator> {
    if !(s < t) {
        return Err(Error::InvalidInput(format!("need s < t, got s = {s}, t = {t}")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    let exact = path.regularity().is_piecewise_constant();
    let mut pts = Partition::aligned(path, s, t)?.points().to_vec();
    pts.extend(nodes.iter().cloned().filter(|&x| x > s && x < t));
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let mut monitored: Vec<f64> = pts[1..].to_vec();
    if nodes.is_empty() {
        monitored = vec![t];
    }
    let mut partition = Partition::new(pts)?;
    if !exact {
        partition = partition.refine().refine();
    }
    let snapshot = |p: &Propagator| -> Result<Vec<DMatrix<f64>>> {
        monitored.iter().map(|&x| p.evaluate(x, s)).collect()
    };
    let mut prop = assemble(path, &partition)?;
    let mut prev = snapshot(&prop)?;
    let mut history = prop.refinement_history.clone();
    let mut below = 0;
    loop {
        let next = partition.refine();
        if next.subintervals() > MAX_SUBINTERVALS {
            let last = history.last().and_then(|h| h.difference).unwrap_or(f64::NAN);
            return Err(Error::RefinementCap {
                cap: MAX_SUBINTERVALS,
                last_difference: last,
                history,
            });
        }
        let candidate = assemble(path, &next)?;
        let cur = snapshot(&candidate)?;
        let mut diff: f64 = 0.0;
        for (a, b) in cur.iter().zip(&prev) {
            diff = diff.max(difference_norm(path, a, b)?);
        }
        history.push(RefinementStep {
            subintervals: next.subintervals(),
            mesh: next.mesh(),
            difference: Some(diff),
        });
        below = if diff <= tol { below + 1 } else { 0 };
        partition = next;
        prop = candidate;
        prev = cur;
        if below >= 2 || (exact && below >= 1) {
            break;
        }
    }
    prop.refinement_history = history;
    prop.converged = true;
    prop.tolerance = Some(tol);
    Ok(prop)
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Reference solution of `U' = -A(t) U`, `U(s) = I`, by adaptive
/// Dormand-Prince 5(4) with the path breakpoints as forced step boundaries.
pub fn ode_oracle(path: &OperatorPath, s: f64, t: f64, tol: f64) -> Result<DMatrix<f64>> {
    if !(s <= t) {
        return Err(Error::InvalidInput(format!("need s <= t, got s = {s}, t = {t}")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    let n = path.dim();
    let mut u = DMatrix::<f64>::identity(n, n);
    let mut stops: Vec<f64> = path
        .breakpoints()
        .iter()
        .cloned()
        .filter(|&b| b > s && b < t)
        .collect();
    stops.push(t);
    let rhs = |time: f64, y: &DMatrix<f64>| -(path.evaluate(time) * y);
    let mut time = s;
    let a_norm = path.evaluate(s).amax().max(1e-12);
    let mut h = (0.1 / a_norm).min(t - s).max(1e-12 * (t - s).max(1.0));
    for &stop in &stops {
        // Re-evaluated at each breakpoint so the new piece is used.
        let mut k1 = rhs(time, &u);
        while time < stop {
            let min_step = 1e-14 * stop.abs().max(1.0);
            let last = h >= stop - time;
            let step = if last { stop - time } else { h };
            let mut ks: Vec<DMatrix<f64>> = vec![k1.clone()];
            for i in 1..7 {
                let mut y = u.clone();
                for (j, k) in ks.iter().enumerate() {
                    if A[i][j] != 0.0 {
                        y += k * (step * A[i][j]);
                    }
                }
                // Evaluate just inside the current piece at its right end.
                let ti = if C[i] == 1.0 { time + step * (1.0 - 1e-15) } else { time + C[i] * step };
                ks.push(rhs(ti, &y));
            }
            let mut y5 = u.clone();
            let mut err = DMatrix::<f64>::zeros(n, n);
            for i in 0..7 {
                if B5[i] != 0.0 {
                    y5 += &ks[i] * (step * B5[i]);
                }
                err += &ks[i] * (step * (B5[i] - B4[i]));
            }
            let scale = tol * (1.0 + y5.amax().max(u.amax()));
            let e = err.amax() / scale;
            if e <= 1.0 {
                time = if last { stop } else { time + step };
                u = y5;
                k1 = ks.swap_remove(6);
            }
            let factor = if e == 0.0 { 5.0 } else { (0.9 * e.powf(-0.2)).clamp(0.2, 5.0) };
            if e <= 1.0 && last {
                h = h.max(step * factor);
            } else {
                h = step * factor;
            }
            if h < min_step && time < stop {
                return Err(Error::StepUnderflow { t: time });
            }
        }
    }
    Ok(u)
}

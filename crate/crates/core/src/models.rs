//! Builders for the application models: dynamic graphs, heat-kernel
//! pagerank, a truncated Black-Scholes operator, metric graphs with vertex
//! conditions and one-dimensional elliptic operators.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forms::{DaviesWeight, DeclaredConstants, MatrixFn, OperatorPath, Regularity};
use crate::hilbert::DiscreteSpace;

/// Scalar time schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant {
        value: f64,
    },
    /// `values[0]` before `breaks[0]`, `values[k]` on `[breaks[k-1], breaks[k])`.
    Piecewise {
        breaks: Vec<f64>,
        values: Vec<f64>,
    },
    /// `mean + amplitude * sin(2 pi t / period + phase)`.
    Sinusoid {
        mean: f64,
        amplitude: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Schedule::Constant { value }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Constant { value } if !value.is_finite() => {
                Err(Error::InvalidInput(format!("schedule value {value} is not finite")))
            }
            Schedule::Piecewise { breaks, values } => {
                if values.len() != breaks.len() + 1 {
                    return Err(Error::InvalidInput(format!(
                        "piecewise schedule with {} breaks needs {} values, got {}",
                        breaks.len(),
                        breaks.len() + 1,
                        values.len()
                    )));
                }
                if breaks.iter().chain(values).any(|x| !x.is_finite()) {
                    return Err(Error::InvalidInput("piecewise schedule has non-finite entries".into()));
                }
                if breaks.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidInput("schedule breaks must be strictly increasing".into()));
                }
                Ok(())
            }
            Schedule::Sinusoid { mean, amplitude, period, phase } => {
                if ![*mean, *amplitude, *phase].iter().all(|x| x.is_finite()) || !(*period > 0.0) {
                    return Err(Error::InvalidInput("sinusoid needs finite parameters and period > 0".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            Schedule::Constant { value } => *value,
            Schedule::Piecewise { breaks, values } => values[breaks.partition_point(|&b| b <= t)],
            Schedule::Sinusoid { mean, amplitude, period, phase } => {
                mean + amplitude * (2.0 * std::f64::consts::PI * t / period + phase).sin()
            }
        }
    }

    pub fn is_piecewise_constant(&self) -> bool {
        !matches!(self, Schedule::Sinusoid { amplitude, .. } if *amplitude != 0.0)
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            Schedule::Piecewise { breaks, .. } => breaks.clone(),
            _ => Vec::new(),
        }
    }

    /// Breakpoints and interior extremum times in `[0, horizon]`.
    fn critical_times(&self, horizon: f64) -> Vec<f64> {
        let mut out = vec![0.0, horizon];
        match self {
            Schedule::Piecewise { breaks, .. } => {
                out.extend(breaks.iter().cloned().filter(|&b| b > 0.0 && b < horizon));
            }
            Schedule::Sinusoid { period, phase, .. } => {
                // 2 pi t / period + phase = pi/2 + k pi
                let step = 0.5 * period;
                let t0 = (0.5 * std::f64::consts::PI - phase) * period / (2.0 * std::f64::consts::PI);
                let k0 = ((0.0 - t0) / step).ceil() as i64;
                let mut k = k0;
                loop {
                    let t = t0 + k as f64 * step;
                    if t > horizon {
                        break;
                    }
                    if t >= 0.0 {
                        out.push(t);
                    }
                    k += 1;
                }
            }
            Schedule::Constant { .. } => {}
        }
        out
    }

    /// Exact `int_a^b` of the schedule.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b < a {
            return -self.integral(b, a);
        }
        match self {
            Schedule::Constant { value } => value * (b - a),
            Schedule::Piecewise { breaks, values } => {
                let mut total = 0.0;
                let mut start = f64::NEG_INFINITY;
                for (k, &v) in values.iter().enumerate() {
                    let end = breaks.get(k).cloned().unwrap_or(f64::INFINITY);
                    let (lo, hi) = (a.max(start), b.min(end));
                    if hi > lo {
                        total += v * (hi - lo);
                    }
                    start = end;
                }
                total
            }
            Schedule::Sinusoid { mean, amplitude, period, phase } => {
                let k = 2.0 * std::f64::consts::PI / period;
                mean * (b - a) - amplitude / k * ((k * b + phase).cos() - (k * a + phase).cos())
            }
        }
    }

    /// Exact `(inf, sup)` over `[0, horizon)`.
    pub fn range(&self, horizon: f64) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        match self {
            Schedule::Piecewise { breaks, values } => {
                let mut start = f64::NEG_INFINITY;
                for (k, &v) in values.iter().enumerate() {
                    let end = breaks.get(k).cloned().unwrap_or(f64::INFINITY);
                    if end > 0.0 && start < horizon {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    start = end;
                }
            }
            _ => {
                for t in self.critical_times(horizon) {
                    let v = self.value(t);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        (lo, hi)
    }

    /// Random on/off switching with exponential holding times of the given
    /// rate, drawn from a seeded generator.
    pub fn poisson_on_off(rate: f64, on: f64, off: f64, start_on: bool, horizon: f64, seed: u64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidInput(format!("switching rate must be positive, got {rate}")));
        }
        let exp = Exp::new(rate).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut breaks = Vec::new();
        let mut values = vec![if start_on { on } else { off }];
        let mut t = 0.0;
        loop {
            t += exp.sample(&mut rng);
            if t >= horizon {
                break;
            }
            breaks.push(t);
            let last = *values.last().expect("non-empty");
            values.push(if last == on { off } else { on });
        }
        Ok(Schedule::Piecewise { breaks, values })
    }

    /// Reads rows `t, value`; each value holds until the next row.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::InvalidInput(format!(
                    "schedule csv line {}: expected 2 fields, found {}",
                    line + 1,
                    rec.len()
                )));
            }
            match (rec[0].parse::<f64>(), rec[1].parse::<f64>()) {
                (Ok(t), Ok(v)) => {
                    times.push(t);
                    values.push(v);
                }
                _ if line == 0 => continue,
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "schedule csv line {}: non-numeric field",
                        line + 1
                    )))
                }
            }
        }
        if times.is_empty() {
            return Err(Error::InvalidInput("schedule csv has no rows".into()));
        }
        if times[0] > 0.0 {
            return Err(Error::InvalidInput("schedule csv must start at t <= 0".into()));
        }
        let s = Schedule::Piecewise { breaks: times[1..].to_vec(), values };
        s.validate()?;
        Ok(s)
    }
}

/// Path regularity induced by a set of schedules.
fn regularity_of<'a>(schedules: impl IntoIterator<Item = &'a Schedule>) -> Regularity {
    let mut breaks = Vec::new();
    let mut pc = true;
    for s in schedules {
        breaks.extend(s.breakpoints());
        pc &= s.is_piecewise_constant();
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    if pc {
        Regularity::PiecewiseConstant { breakpoints: breaks }
    } else {
        Regularity::Smooth { kinks: breaks }
    }
}

/// Evaluation times: critical times, piece midpoints and a uniform grid.
fn probe_times<'a>(schedules: impl IntoIterator<Item = &'a Schedule>, horizon: f64, grid: usize) -> Vec<f64> {
    let mut t: Vec<f64> = (0..grid).map(|i| horizon * i as f64 / (grid - 1) as f64).collect();
    for s in schedules {
        t.extend(s.critical_times(horizon));
    }
    t.retain(|x| *x >= 0.0 && *x <= horizon);
    t.sort_by(f64::total_cmp);
    t.dedup();
    let mids: Vec<f64> = t.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    t.extend(mids);
    t.sort_by(f64::total_cmp);
    // values are held on [t_k, t_{k+1}), so the horizon itself is excluded
    if t.len() > 1 {
        t.pop();
    }
    t
}

// ---------------------------------------------------------------- graphs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub initial: usize,
    pub terminal: usize,
    /// Index into the model's schedule table.
    pub schedule: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphModel {
    pub nodes: usize,
    pub edges: Vec<GraphEdge>,
    pub schedules: Vec<Schedule>,
    pub dirichlet_nodes: Vec<usize>,
    /// Declared bound on the number of edges at a node.
    pub max_degree: Option<usize>,
    pub coords: Option<Vec<f64>>,
    pub horizon: f64,
}

/// An assembled graph path with the node bookkeeping needed for domination
/// and connectivity checks.
#[derive(Debug, Clone)]
pub struct BuiltGraph {
    pub path: OperatorPath,
    /// Original node index of each retained row.
    pub retained: Vec<usize>,
    /// Probe times at which the edges with positive weight leave the graph
    /// disconnected.
    pub disconnected_times: Vec<f64>,
}

impl GraphModel {
    /// Path graph on positions `-R-1, ..., R+1` with the two outermost nodes
    /// Dirichlet; edges are oriented left to right and share one schedule.
    pub fn truncated_lattice(radius: usize, weight: Schedule, horizon: f64) -> Self {
        let n = 2 * radius + 3;
        let edges = (0..n - 1)
            .map(|i| GraphEdge { initial: i, terminal: i + 1, schedule: 0 })
            .collect();
        let r = radius as f64 + 1.0;
        Self {
            nodes: n,
            edges,
            schedules: vec![weight],
            dirichlet_nodes: vec![0, n - 1],
            max_degree: Some(2),
            coords: Some((0..n).map(|i| i as f64 - r).collect()),
            horizon,
        }
    }

    /// Parses an edge list with one `head, tail, schedule-id` triple per line
    /// (`#` starts a comment). The tail is the initial endpoint.
    pub fn from_edge_list(
        text: &str,
        nodes: Option<usize>,
        schedules: &BTreeMap<String, Schedule>,
        horizon: f64,
    ) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut table: Vec<Schedule> = Vec::new();
        let mut ids: BTreeMap<String, usize> = BTreeMap::new();
        let mut edges = Vec::new();
        let mut max_node = 0;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let lineno = rec.position().map(|p| p.line()).unwrap_or(line as u64 + 1);
            if rec.len() != 3 {
                return Err(Error::InvalidInput(format!(
                    "edge list line {lineno}: expected head, tail, schedule-id"
                )));
            }
            let (head, tail) = match (rec[0].parse::<usize>(), rec[1].parse::<usize>()) {
                (Ok(h), Ok(t)) => (h, t),
                _ if line == 0 => continue,
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "edge list line {lineno}: node labels must be nonnegative integers"
                    )))
                }
            };
            let id = rec[2].to_string();
            let idx = match ids.get(&id) {
                Some(&k) => k,
                None => {
                    let s = schedules.get(&id).ok_or_else(|| {
                        Error::InvalidInput(format!("edge list line {lineno}: unknown schedule '{id}'"))
                    })?;
                    table.push(s.clone());
                    ids.insert(id, table.len() - 1);
                    table.len() - 1
                }
            };
            max_node = max_node.max(head).max(tail);
            edges.push(GraphEdge { initial: tail, terminal: head, schedule: idx });
        }
        let n = nodes.unwrap_or(max_node + 1);
        Ok(Self {
            nodes: n,
            edges,
            schedules: table,
            dirichlet_nodes: Vec::new(),
            max_degree: None,
            coords: None,
            horizon,
        })
    }

    /// Signed node-by-edge incidence: `-1` at the initial endpoint, `+1` at
    /// the terminal endpoint.
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nodes, self.edges.len());
        for (e, ed) in self.edges.iter().enumerate() {
            m[(ed.initial, e)] -= 1.0;
            m[(ed.terminal, e)] += 1.0;
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::InvalidInput("graph has no nodes".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {}", self.horizon)));
        }
        for s in &self.schedules {
            s.validate()?;
        }
        let mut degree = vec![0usize; self.nodes];
        for (e, ed) in self.edges.iter().enumerate() {
            if ed.initial >= self.nodes || ed.terminal >= self.nodes {
                return Err(Error::InvalidInput(format!("edge {e} references a node outside 0..{}", self.nodes)));
            }
            if ed.initial == ed.terminal {
                return Err(Error::InvalidInput(format!(
                    "edge {e} is a loop; incidence columns need distinct endpoints"
                )));
            }
            let s = self.schedules.get(ed.schedule).ok_or_else(|| {
                Error::InvalidInput(format!("edge {e} references missing schedule {}", ed.schedule))
            })?;
            let (lo, _) = s.range(self.horizon);
            if lo < 0.0 {
                return Err(Error::InvalidInput(format!("edge {e} has negative weight {lo}")));
            }
            degree[ed.initial] += 1;
            degree[ed.terminal] += 1;
        }
        if let Some(m) = self.max_degree {
            if let Some((v, d)) = degree.iter().enumerate().find(|(_, &d)| d > m) {
                return Err(Error::InvalidInput(format!(
                    "node {v} has {d} edges, above the declared local bound {m}"
                )));
            }
        }
        if let Some(&v) = self.dirichlet_nodes.iter().find(|&&v| v >= self.nodes) {
            return Err(Error::InvalidInput(format!("Dirichlet node {v} out of range")));
        }
        if let Some(c) = &self.coords {
            if c.len() != self.nodes {
                return Err(Error::DimensionMismatch { expected: self.nodes, found: c.len() });
            }
        }
        Ok(())
    }

    fn retained(&self) -> Vec<usize> {
        (0..self.nodes).filter(|v| !self.dirichlet_nodes.contains(v)).collect()
    }

    /// The same graph without Dirichlet nodes.
    pub fn without_dirichlet(&self) -> Self {
        Self { dirichlet_nodes: Vec::new(), ..self.clone() }
    }

    fn probe_times(&self) -> Vec<f64> {
        probe_times(&self.schedules, self.horizon, 65)
    }

    fn space(&self, retained: &[usize]) -> Result<DiscreteSpace> {
        let space = DiscreteSpace::uniform(retained.len());
        match &self.coords {
            Some(c) => space.with_coords(retained.iter().map(|&v| c[v]).collect()),
            None => Ok(space),
        }
    }
}

fn connected(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> bool {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut comps = n;
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            comps -= 1;
        }
    }
    comps <= 1
}

/// Weighted Laplacian `I diag(m(t)) I^T`, with Dirichlet rows and columns
/// deleted.
pub fn build_dynamic_graph(model: &GraphModel) -> Result<BuiltGraph> {
    model.validate()?;
    let retained = model.retained();
    if retained.is_empty() {
        return Err(Error::InvalidInput("every node is Dirichlet".into()));
    }
    let mut index = vec![usize::MAX; model.nodes];
    for (k, &v) in retained.iter().enumerate() {
        index[v] = k;
    }
    let n = retained.len();
    let edges: Vec<(usize, usize, usize)> = model
        .edges
        .iter()
        .map(|e| (index[e.initial], index[e.terminal], e.schedule))
        .collect();
    let schedules = model.schedules.clone();
    let eval: MatrixFn = Arc::new(move |t| {
        let mut l = DMatrix::zeros(n, n);
        for &(i, j, s) in &edges {
            let m = schedules[s].value(t);
            if i != usize::MAX {
                l[(i, i)] += m;
            }
            if j != usize::MAX {
                l[(j, j)] += m;
            }
            if i != usize::MAX && j != usize::MAX {
                l[(i, j)] -= m;
                l[(j, i)] -= m;
            }
        }
        l
    });
    let mut node_sup = vec![0.0; model.nodes];
    for e in &model.edges {
        let (_, hi) = model.schedules[e.schedule].range(model.horizon);
        node_sup[e.initial] += hi;
        node_sup[e.terminal] += hi;
    }
    let bound = 2.0 * node_sup.iter().cloned().fold(0.0, f64::max);
    let path = OperatorPath::new(
        model.space(&retained)?,
        model.horizon,
        eval,
        regularity_of(&model.schedules),
    )?
    .with_declared(DeclaredConstants { m: Some(bound.max(f64::MIN_POSITIVE)), ..Default::default() });
    let disconnected_times = model
        .probe_times()
        .into_iter()
        .filter(|&t| {
            !connected(
                model.nodes,
                model
                    .edges
                    .iter()
                    .filter(|e| model.schedules[e.schedule].value(t) > 0.0)
                    .map(|e| (e.initial, e.terminal)),
            )
        })
        .collect();
    Ok(BuiltGraph { path, retained, disconnected_times })
}

/// Heat-kernel pagerank generator `I - P(t)` with
/// `P_uv = sum_{e: v -> u} m_e(t) / deg_out(v)`.
pub fn build_pagerank(model: &GraphModel) -> Result<OperatorPath> {
    model.validate()?;
    if !model.dirichlet_nodes.is_empty() {
        return Err(Error::InvalidInput("pagerank models take no Dirichlet nodes".into()));
    }
    let n = model.nodes;
    let mut out_edges = vec![Vec::new(); n];
    for e in &model.edges {
        out_edges[e.initial].push(e.schedule);
    }
    let times = model.probe_times();
    for (v, outs) in out_edges.iter().enumerate() {
        if outs.is_empty() {
            return Err(Error::DanglingNode { node: v, t: 0.0 });
        }
        let lower: f64 = outs.iter().map(|&s| model.schedules[s].range(model.horizon).0).sum();
        if lower > 0.0 {
            continue;
        }
        for &t in &times {
            let deg: f64 = outs.iter().map(|&s| model.schedules[s].value(t)).sum();
            if deg <= 0.0 {
                return Err(Error::DanglingNode { node: v, t });
            }
        }
    }
    let edges: Vec<(usize, usize, usize)> =
        model.edges.iter().map(|e| (e.initial, e.terminal, e.schedule)).collect();
    let schedules = model.schedules.clone();
    let eval: MatrixFn = Arc::new(move |t| {
        let w: Vec<f64> = schedules.iter().map(|s| s.value(t)).collect();
        let mut deg = vec![0.0; n];
        for &(v, _, s) in &edges {
            deg[v] += w[s];
        }
        let mut a = DMatrix::identity(n, n);
        for &(v, u, s) in &edges {
            a[(u, v)] -= w[s] / deg[v];
        }
        a
    });
    OperatorPath::new(model.space(&(0..n).collect::<Vec<_>>())?, model.horizon, eval, regularity_of(&model.schedules))
}

// ---------------------------------------------------------- Black-Scholes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlackScholesModel {
    pub sigma: Schedule,
    pub rate: f64,
    /// Left truncation point `epsilon > 0`.
    pub x_min: f64,
    pub x_max: f64,
    /// Number of finite elements on `[x_min, x_max]`.
    pub elements: usize,
    pub horizon: f64,
}

impl BlackScholesModel {
    pub fn validate(&self) -> Result<(f64, f64)> {
        self.sigma.validate()?;
        if !(self.x_min > 0.0 && self.x_max > self.x_min && self.x_max.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "truncation needs 0 < x_min < x_max, got [{}, {}]",
                self.x_min, self.x_max
            )));
        }
        if self.elements < 2 {
            return Err(Error::InvalidInput("at least two elements are needed".into()));
        }
        if !self.rate.is_finite() {
            return Err(Error::InvalidInput("interest rate must be finite".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {}", self.horizon)));
        }
        let (lo, hi) = self.sigma.range(self.horizon);
        if !(lo > 0.0 && hi.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "volatility must satisfy 0 < sigma_0 <= sigma(t) <= sigma_1 < inf, found range [{lo}, {hi}]"
            )));
        }
        Ok((lo, hi))
    }

    /// Interior grid nodes.
    pub fn nodes(&self) -> Vec<f64> {
        let h = (self.x_max - self.x_min) / self.elements as f64;
        (1..self.elements).map(|i| self.x_min + i as f64 * h).collect()
    }

    /// `sup_t (sigma(t)^2 - 3r/2)^+`.
    pub fn declared_omega(&self) -> f64 {
        let (lo, hi) = self.sigma.range(self.horizon);
        let s2 = (lo * lo).max(hi * hi);
        (s2 - 1.5 * self.rate).max(0.0)
    }
}

/// Linear finite elements with lumped mass on `[x_min, x_max]`, Dirichlet at
/// both artificial boundaries, for the form
/// `sigma^2/2 (x^2 u', v') + (sigma^2 - r)(x u', v) + r (u, v)`.
pub fn build_black_scholes(model: &BlackScholesModel) -> Result<OperatorPath> {
    let (s_lo, _) = model.validate()?;
    let ne = model.elements;
    let h = (model.x_max - model.x_min) / ne as f64;
    let x = |i: usize| model.x_min + i as f64 * h;
    let n = ne - 1;
    // full-grid matrices, interior block extracted afterwards
    let mut k2 = DMatrix::<f64>::zeros(ne + 1, ne + 1);
    let mut drift = DMatrix::<f64>::zeros(ne + 1, ne + 1);
    for k in 0..ne {
        let (xl, xr) = (x(k), x(k + 1));
        let s = (xr.powi(3) - xl.powi(3)) / (3.0 * h * h);
        k2[(k, k)] += s;
        k2[(k + 1, k + 1)] += s;
        k2[(k, k + 1)] -= s;
        k2[(k + 1, k)] -= s;
        // int x phi_a over the element, Simpson (exact for quadratics)
        let xm = 0.5 * (xl + xr);
        let int_left = h / 6.0 * (xl + 4.0 * xm * 0.5);
        let int_right = h / 6.0 * (4.0 * xm * 0.5 + xr);
        // row = test function, column = trial; trial slopes are -1/h, +1/h
        for (a, int_a) in [(k, int_left), (k + 1, int_right)] {
            drift[(a, k)] -= int_a / h;
            drift[(a, k + 1)] += int_a / h;
        }
    }
    let k2 = k2.view((1, 1), (n, n)).into_owned();
    let drift = drift.view((1, 1), (n, n)).into_owned();
    let mut gram = k2.clone();
    for i in 0..n {
        gram[(i, i)] += h;
    }
    let r = model.rate;
    let sigma = model.sigma.clone();
    let eval: MatrixFn = Arc::new(move |t| {
        let s2 = sigma.value(t).powi(2);
        let mut f = &k2 * (0.5 * s2) + &drift * (s2 - r);
        for i in 0..n {
            f[(i, i)] += r * h;
        }
        f / h
    });
    let space = DiscreteSpace::new(vec![h; n])?
        .with_v_metric(gram)?
        .with_coords(model.nodes())?;
    let path = OperatorPath::new(space, model.horizon, eval, regularity_of([&model.sigma]))?;
    Ok(path.with_declared(DeclaredConstants {
        m: None,
        alpha: Some(0.5 * s_lo * s_lo),
        omega: Some(model.declared_omega()),
    }))
}

// ------------------------------------------------------------ metric graphs

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricGraphFlags {
    /// Declared: the form domain is a generalized ideal of the Neumann domain.
    pub generalized_ideal: bool,
    /// Declared: the domain is invariant under the trace of the conductances.
    pub cv_invariant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricGraphModel {
    pub vertices: usize,
    /// `(initial, terminal)`; every edge is identified with `[0, 1]`.
    pub edges: Vec<(usize, usize)>,
    pub points_per_edge: usize,
    /// One schedule shared by all edges, or one per edge.
    pub conductance: Vec<Schedule>,
    pub potential: Vec<Schedule>,
    /// Basis of the vertex space, one row per basis vector of length
    /// `2|E|`; trace `2e` is the value at the initial end of edge `e`,
    /// `2e + 1` at the terminal end. `None` means continuity at vertices.
    pub y_basis: Option<Vec<Vec<f64>>>,
    /// `Sigma(t) = sigma(t) S` on the vertex space, with `S` given in basis
    /// coordinates (identity on `Y` when `None`).
    pub sigma: Schedule,
    pub sigma_matrix: Option<Vec<Vec<f64>>>,
    pub flags: MetricGraphFlags,
    pub horizon: f64,
}

impl MetricGraphModel {
    /// Standard continuity/Kirchhoff model with unit conductance, no
    /// potential and `Sigma = 0`.
    pub fn kirchhoff(vertices: usize, edges: Vec<(usize, usize)>, points_per_edge: usize, horizon: f64) -> Self {
        Self {
            vertices,
            edges,
            points_per_edge,
            conductance: vec![Schedule::constant(1.0)],
            potential: vec![Schedule::constant(0.0)],
            y_basis: None,
            sigma: Schedule::constant(0.0),
            sigma_matrix: None,
            flags: MetricGraphFlags { generalized_ideal: true, cv_invariant: true },
            horizon,
        }
    }

    /// Continuity basis: one indicator of the traces at each used vertex.
    pub fn continuity_basis(&self) -> Vec<Vec<f64>> {
        let mut rows = Vec::new();
        for v in 0..self.vertices {
            let mut row = vec![0.0; 2 * self.edges.len()];
            for (e, &(a, b)) in self.edges.iter().enumerate() {
                if a == v {
                    row[2 * e] = 1.0;
                }
                if b == v {
                    row[2 * e + 1] = 1.0;
                }
            }
            if row.iter().any(|&x| x != 0.0) {
                rows.push(row);
            }
        }
        rows
    }

    fn per_edge<'a>(&'a self, list: &'a [Schedule], name: &str) -> Result<Vec<&'a Schedule>> {
        let ne = self.edges.len();
        match list.len() {
            1 => Ok(vec![&list[0]; ne]),
            k if k == ne => Ok(list.iter().collect()),
            k => Err(Error::InvalidInput(format!("{name}: expected 1 or {ne} schedules, got {k}"))),
        }
    }
}

/// Trace basis as columns, orthonormalized when supports overlap.
fn trace_basis(model: &MetricGraphModel) -> Result<DMatrix<f64>> {
    let rows = model.y_basis.clone().unwrap_or_else(|| model.continuity_basis());
    let nt = 2 * model.edges.len();
    if rows.is_empty() {
        return Ok(DMatrix::zeros(nt, 0));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != nt) {
        return Err(Error::DimensionMismatch { expected: nt, found: r.len() });
    }
    let k = rows.len();
    let b = DMatrix::from_fn(nt, k, |i, c| rows[c][i]);
    if b.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("vertex-space basis has non-finite entries".into()));
    }
    let sv = b.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    if k > nt || !(smin > 1e-10 * smax.max(f64::MIN_POSITIVE)) {
        return Err(Error::InvalidInput(format!(
            "vertex-space basis is rank deficient (singular values in [{smin:e}, {smax:e}])"
        )));
    }
    let disjoint = (0..nt).all(|i| (0..k).filter(|&c| b[(i, c)] != 0.0).count() <= 1);
    if disjoint {
        Ok(b)
    } else {
        Ok(b.qr().q().columns(0, k).into_owned())
    }
}

/// Linear elements on each unit edge with trace values expressed in the
/// vertex-space basis. Returns a path on the weighted space of nodal values
/// whose energy metric is mass plus stiffness.
pub fn build_metric_graph(model: &MetricGraphModel) -> Result<OperatorPath> {
    let ne = model.edges.len();
    if ne == 0 {
        return Err(Error::InvalidInput("metric graph has no edges".into()));
    }
    if model.points_per_edge < 3 {
        return Err(Error::InvalidInput(format!(
            "points_per_edge must be at least 3, got {}",
            model.points_per_edge
        )));
    }
    if let Some(&(a, b)) = model.edges.iter().find(|&&(a, b)| a >= model.vertices || b >= model.vertices) {
        return Err(Error::InvalidInput(format!("edge ({a}, {b}) references a missing vertex")));
    }
    let cond = model.per_edge(&model.conductance, "conductance")?;
    let pot = model.per_edge(&model.potential, "potential")?;
    for s in cond.iter().chain(&pot).chain([&&model.sigma]) {
        s.validate()?;
    }
    let gamma = cond.iter().map(|s| s.range(model.horizon).0).fold(f64::INFINITY, f64::min);
    if !(gamma > 0.0) {
        return Err(Error::InvalidInput(format!("conductance must stay positive, infimum {gamma}")));
    }
    let b = trace_basis(model)?;
    let k = b.ncols();
    let m = model.points_per_edge;
    let interior = m - 2;
    let n = ne * interior + k;
    let h = 1.0 / (m - 1) as f64;

    // nodal value of local node l on edge e as a combination of DOFs
    let expand = |e: usize, l: usize| -> Vec<(usize, f64)> {
        if l == 0 || l == m - 1 {
            let tr = 2 * e + usize::from(l == m - 1);
            (0..k).filter(|&c| b[(tr, c)] != 0.0).map(|c| (ne * interior + c, b[(tr, c)])).collect()
        } else {
            vec![(e * interior + l - 1, 1.0)]
        }
    };
    let mut stiff = Vec::with_capacity(ne);
    let mut mass = Vec::with_capacity(ne);
    for e in 0..ne {
        let mut ke = DMatrix::<f64>::zeros(n, n);
        let mut me = DMatrix::<f64>::zeros(n, n);
        for l in 0..m {
            let wl = if l == 0 || l == m - 1 { 0.5 * h } else { h };
            let xl = expand(e, l);
            for &(p, cp) in &xl {
                for &(q, cq) in &xl {
                    me[(p, q)] += wl * cp * cq;
                }
            }
            if l + 1 < m {
                let xr = expand(e, l + 1);
                let diff: Vec<(usize, f64)> =
                    xr.iter().cloned().chain(xl.iter().map(|&(p, c)| (p, -c))).collect();
                for &(p, cp) in &diff {
                    for &(q, cq) in &diff {
                        ke[(p, q)] += cp * cq / h;
                    }
                }
            }
        }
        stiff.push(ke);
        mass.push(me);
    }
    let total_mass: DMatrix<f64> = mass.iter().fold(DMatrix::zeros(n, n), |acc, x| acc + x);
    let weights: Vec<f64> = (0..n).map(|i| total_mass[(i, i)]).collect();
    let off = (&total_mass - DMatrix::from_diagonal(&nalgebra::DVector::from_vec(weights.clone()))).amax();
    if off > 1e-12 * h {
        return Err(Error::InvalidInput("lumped mass is not diagonal for this vertex space".into()));
    }
    let s_y = match &model.sigma_matrix {
        None => b.transpose() * &b,
        Some(rows) => {
            if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                return Err(Error::DimensionMismatch { expected: k, found: rows.len() });
            }
            DMatrix::from_fn(k, k, |i, j| rows[i][j])
        }
    };
    let mut sigma_block = DMatrix::<f64>::zeros(n, n);
    sigma_block.view_mut((ne * interior, ne * interior), (k, k)).copy_from(&s_y);
    let total_stiff: DMatrix<f64> = stiff.iter().fold(DMatrix::zeros(n, n), |acc, x| acc + x);
    let gram = &total_stiff + &total_mass;
    let winv: Vec<f64> = weights.iter().map(|w| 1.0 / w).collect();
    let cond: Vec<Schedule> = cond.into_iter().cloned().collect();
    let pot: Vec<Schedule> = pot.into_iter().cloned().collect();
    let sigma = model.sigma.clone();
    let schedules: Vec<Schedule> = cond.iter().chain(&pot).cloned().chain([sigma.clone()]).collect();
    let eval: MatrixFn = Arc::new(move |t| {
        let mut f = &sigma_block * sigma.value(t);
        for e in 0..ne {
            f += &stiff[e] * cond[e].value(t);
            let p = pot[e].value(t);
            if p != 0.0 {
                f += &mass[e] * p;
            }
        }
        for i in 0..n {
            for j in 0..n {
                f[(i, j)] *= winv[i];
            }
        }
        f
    });
    let space = DiscreteSpace::new(weights)?.with_v_metric(gram)?;
    OperatorPath::new(space, model.horizon, eval, regularity_of(&schedules))
}

// -------------------------------------------------------- elliptic in 1D

/// Spatial factor of a separable coefficient.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum SpatialProfile {
    #[default]
    Uniform,
    /// `offset + amplitude * cos(wavenumber * x + phase)`.
    Cosine {
        offset: f64,
        amplitude: f64,
        wavenumber: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `intercept + slope * x`.
    Affine { intercept: f64, slope: f64 },
}

impl SpatialProfile {
    pub fn value(&self, x: f64) -> f64 {
        match self {
            SpatialProfile::Uniform => 1.0,
            SpatialProfile::Cosine { offset, amplitude, wavenumber, phase } => {
                offset + amplitude * (wavenumber * x + phase).cos()
            }
            SpatialProfile::Affine { intercept, slope } => intercept + slope * x,
        }
    }
}

/// Real coefficient `time(t) * space(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub time: Schedule,
    #[serde(default)]
    pub space: SpatialProfile,
}

impl Coefficient {
    pub fn constant(v: f64) -> Self {
        Self { time: Schedule::constant(v), space: SpatialProfile::Uniform }
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        self.time.value(t) * self.space.value(x)
    }

    /// Exact `(inf, sup)` over `[0, T) x points`.
    fn range(&self, horizon: f64, points: &[f64]) -> (f64, f64) {
        let (t0, t1) = self.time.range(horizon);
        let xs: Vec<f64> = points.iter().map(|&x| self.space.value(x)).collect();
        let x0 = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let x1 = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let c = [t0 * x0, t0 * x1, t1 * x0, t1 * x1];
        (
            c.iter().cloned().fold(f64::INFINITY, f64::min),
            c.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Dirichlet,
    Neumann,
}

/// Operator `-(a11 u')' + b u' - (c u)' + a0 u` on an interval, in form
/// sense `(a11 u', v') + (b u', v) + (c u, v') + (a0 u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Elliptic1DModel {
    pub domain: (f64, f64),
    pub cells: usize,
    pub boundary: Boundary,
    pub a11: Coefficient,
    pub b: Coefficient,
    pub c: Coefficient,
    pub a0: Coefficient,
    /// Declared ellipticity constant; measured from the grid when absent.
    pub nu: Option<f64>,
    /// Declared bound on all coefficients; measured when absent.
    pub c0: Option<f64>,
    pub horizon: f64,
}

/// Sup-norm inputs of the contractivity formulas, measured on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoefficientBounds {
    pub nu: f64,
    pub c0: f64,
    pub a0_negative: f64,
    pub b_minus_c: f64,
    pub b: f64,
    pub c: f64,
}

/// Edge coefficients of the discrete form on one cell:
/// `k du dv / h + bb du sv / 2 + cc su dv / 2 + z h su sv / 4` with
/// `du = u_j - u_i`, `su = u_i + u_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeCoefficients {
    pub k: f64,
    pub b: f64,
    pub c: f64,
    pub z: f64,
}

impl EdgeCoefficients {
    /// Coefficients of the conjugated form `a(e^{-rho psi} u, e^{rho psi} v)`
    /// on a cell where `psi` increases by `dpsi`.
    pub fn conjugated(&self, h: f64, rho: f64, dpsi: f64) -> Self {
        let th = 0.5 * rho * dpsi;
        let (ch, sh) = (th.cosh(), th.sinh());
        let (a, b, c) = (self.k, self.b, self.c);
        debug_assert!(self.z == 0.0, "conjugation expects an unperturbed cell");
        Self {
            k: a * ch * ch + 0.5 * h * ch * sh * (b - c),
            b: 2.0 * a * ch * sh / h + b * ch * ch - c * sh * sh,
            c: -2.0 * a * ch * sh / h - b * sh * sh + c * ch * ch,
            z: -4.0 * a * sh * sh / (h * h) - 2.0 * (b - c) * sh * ch / h,
        }
    }

    fn scatter(&self, f: &mut DMatrix<f64>, i: Option<usize>, j: Option<usize>, h: f64) {
        let zz = self.z * h / 4.0;
        let entries = [
            (i, i, self.k / h - 0.5 * self.b - 0.5 * self.c + zz),
            (i, j, -self.k / h + 0.5 * self.b - 0.5 * self.c + zz),
            (j, i, -self.k / h - 0.5 * self.b + 0.5 * self.c + zz),
            (j, j, self.k / h + 0.5 * self.b + 0.5 * self.c + zz),
        ];
        for (r, s, v) in entries {
            if let (Some(r), Some(s)) = (r, s) {
                f[(r, s)] += v;
            }
        }
    }
}

impl Elliptic1DModel {
    /// Constant-coefficient model on `[0, 1]`.
    pub fn constant(cells: usize, boundary: Boundary, a11: f64, b: f64, c: f64, a0: f64, horizon: f64) -> Self {
        Self {
            domain: (0.0, 1.0),
            cells,
            boundary,
            a11: Coefficient::constant(a11),
            b: Coefficient::constant(b),
            c: Coefficient::constant(c),
            a0: Coefficient::constant(a0),
            nu: None,
            c0: None,
            horizon,
        }
    }

    pub fn step(&self) -> f64 {
        (self.domain.1 - self.domain.0) / self.cells as f64
    }

    fn grid(&self) -> Vec<f64> {
        let h = self.step();
        (0..=self.cells).map(|i| self.domain.0 + i as f64 * h).collect()
    }

    fn midpoints(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.cells).map(|i| self.domain.0 + (i as f64 + 0.5) * h).collect()
    }

    /// Grid indices carrying unknowns.
    pub fn retained(&self) -> Vec<usize> {
        match self.boundary {
            Boundary::Neumann => (0..=self.cells).collect(),
            Boundary::Dirichlet => (1..self.cells).collect(),
        }
    }

    /// Positions of the unknowns.
    pub fn coords(&self) -> Vec<f64> {
        let g = self.grid();
        self.retained().into_iter().map(|i| g[i]).collect()
    }

    fn weights(&self) -> Vec<f64> {
        let h = self.step();
        self.retained()
            .into_iter()
            .map(|i| if i == 0 || i == self.cells { 0.5 * h } else { h })
            .collect()
    }

    fn schedules(&self) -> [&Schedule; 4] {
        [&self.a11.time, &self.b.time, &self.c.time, &self.a0.time]
    }

    pub fn validate(&self) -> Result<CoefficientBounds> {
        if !(self.domain.0 < self.domain.1) || !self.domain.0.is_finite() || !self.domain.1.is_finite() {
            return Err(Error::InvalidInput(format!("invalid domain {:?}", self.domain)));
        }
        let min_cells = if self.boundary == Boundary::Dirichlet { 2 } else { 1 };
        if self.cells < min_cells {
            return Err(Error::InvalidInput(format!("need at least {min_cells} cells")));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {}", self.horizon)));
        }
        for s in self.schedules() {
            s.validate()?;
        }
        let mids = self.midpoints();
        let nodes = self.grid();
        let t = self.horizon;
        let (a_lo, a_hi) = self.a11.range(t, &mids);
        let (b_lo, b_hi) = self.b.range(t, &mids);
        let (c_lo, c_hi) = self.c.range(t, &mids);
        let (z_lo, z_hi) = self.a0.range(t, &nodes);
        if !(a_lo > 0.0) {
            return Err(Error::EllipticityLost(format!("a11 reaches {a_lo} on the grid")));
        }
        let nu = match self.nu {
            Some(nu) if nu > 0.0 && nu <= a_lo * (1.0 + 1e-12) => nu,
            Some(nu) => {
                return Err(Error::InvalidInput(format!(
                    "declared nu = {nu} is not a lower bound for a11 (infimum {a_lo})"
                )))
            }
            None => a_lo,
        };
        let sup = |lo: f64, hi: f64| lo.abs().max(hi.abs());
        let measured_c0 = sup(a_lo, a_hi).max(sup(b_lo, b_hi)).max(sup(c_lo, c_hi)).max(sup(z_lo, z_hi));
        let c0 = match self.c0 {
            Some(c0) if c0 >= measured_c0 * (1.0 - 1e-12) => c0,
            Some(c0) => {
                return Err(Error::InvalidInput(format!(
                    "declared c0 = {c0} is below the coefficient bound {measured_c0}"
                )))
            }
            None => measured_c0,
        };
        // b - c is not separable; sample it on the probe times
        let times = probe_times(self.schedules(), self.horizon, 257);
        let mut bmc: f64 = 0.0;
        for &tt in &times {
            for &x in &mids {
                bmc = bmc.max((self.b.value(tt, x) - self.c.value(tt, x)).abs());
            }
        }
        Ok(CoefficientBounds {
            nu,
            c0,
            a0_negative: (-z_lo).max(0.0),
            b_minus_c: bmc,
            b: sup(b_lo, b_hi),
            c: sup(c_lo, c_hi),
        })
    }

    /// Cell coefficients at time `t`.
    pub fn edge_coefficients(&self, t: f64) -> Vec<EdgeCoefficients> {
        self.midpoints()
            .into_iter()
            .map(|x| EdgeCoefficients {
                k: self.a11.value(t, x),
                b: self.b.value(t, x),
                c: self.c.value(t, x),
                z: 0.0,
            })
            .collect()
    }

    /// Form matrix at time `t`, optionally for the weight-conjugated form
    /// with `psi` given on the unknowns.
    pub fn form_matrix(&self, t: f64, conj: Option<(&[f64], f64)>) -> DMatrix<f64> {
        let h = self.step();
        let retained = self.retained();
        let n = retained.len();
        let mut index = vec![None; self.cells + 1];
        for (k, &i) in retained.iter().enumerate() {
            index[i] = Some(k);
        }
        let mut f = DMatrix::zeros(n, n);
        for (e, coef) in self.edge_coefficients(t).into_iter().enumerate() {
            let (i, j) = (index[e], index[e + 1]);
            let coef = match (conj, i, j) {
                (Some((psi, rho)), Some(i), Some(j)) => coef.conjugated(h, rho, psi[j] - psi[i]),
                _ => coef,
            };
            coef.scatter(&mut f, i, j, h);
        }
        let g = self.grid();
        for (k, (&i, w)) in retained.iter().zip(self.weights()).enumerate() {
            f[(k, k)] += w * self.a0.value(t, g[i]);
        }
        f
    }

    /// Energy metric: unit stiffness plus lumped mass.
    fn gram(&self) -> DMatrix<f64> {
        let unit = Self::constant(self.cells, self.boundary, 1.0, 0.0, 0.0, 0.0, 1.0);
        let unit = Self { domain: self.domain, ..unit };
        let mut g = unit.form_matrix(0.0, None);
        for (k, w) in self.weights().into_iter().enumerate() {
            g[(k, k)] += w;
        }
        g
    }

    pub fn space(&self) -> Result<DiscreteSpace> {
        DiscreteSpace::new(self.weights())?.with_v_metric(self.gram())?.with_coords(self.coords())
    }

    /// Direct assembly of the weight-conjugated path; agrees with
    /// `forms::davies_perturb` on the assembled path.
    pub fn build_conjugated(&self, weight: &DaviesWeight, rho: f64) -> Result<OperatorPath> {
        let base = build_elliptic_1d(self)?;
        if weight.psi.len() != base.dim() {
            return Err(Error::DimensionMismatch { expected: base.dim(), found: weight.psi.len() });
        }
        let model = self.clone();
        let psi = weight.psi.clone();
        let winv: Vec<f64> = self.weights().iter().map(|w| 1.0 / w).collect();
        let eval: MatrixFn = Arc::new(move |t| {
            let mut f = model.form_matrix(t, Some((&psi, rho)));
            for (i, w) in winv.iter().enumerate() {
                f.row_mut(i).scale_mut(*w);
            }
            f
        });
        OperatorPath::new(self.space()?, self.horizon, eval, regularity_of(self.schedules()))
    }
}

pub fn build_elliptic_1d(model: &Elliptic1DModel) -> Result<OperatorPath> {
    model.validate()?;
    let m = model.clone();
    let winv: Vec<f64> = model.weights().iter().map(|w| 1.0 / w).collect();
    let eval: MatrixFn = Arc::new(move |t| {
        let mut f = m.form_matrix(t, None);
        for (i, w) in winv.iter().enumerate() {
            f.row_mut(i).scale_mut(*w);
        }
        f
    });
    OperatorPath::new(model.space()?, model.horizon, eval, regularity_of(model.schedules()))
}

/// The `L^p` quasi-contractivity rate as pure arithmetic on the sup-norm
/// inputs (sums over the space dimension already taken).
pub fn omega_p_formula(p: f64, nu: f64, a0_negative: f64, b_minus_c_sq: f64, c_sq: f64, b_sq: f64) -> Result<f64> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::InvalidInput(format!("p must lie in (1, inf), got {p}")));
    }
    if !(nu > 0.0) {
        return Err(Error::InvalidInput(format!("nu must be positive, got {nu}")));
    }
    Ok(if p >= 2.0 {
        a0_negative + (1.0 / p + 0.5) * b_minus_c_sq / nu + p * c_sq / nu
    } else {
        a0_negative + (0.5 + (p - 1.0) / p) * b_minus_c_sq / nu + p * b_sq / (nu * (p - 1.0))
    })
}

pub fn omega_p_bound(model: &Elliptic1DModel, p: f64) -> Result<f64> {
    let cb = model.validate()?;
    omega_p_formula(p, cb.nu, cb.a0_negative, cb.b_minus_c.powi(2), cb.c.powi(2), cb.b.powi(2))
}

/// `(alpha_1, alpha_2, alpha_1^*, alpha_2^*)` of the linear
/// quasi-contractivity estimate for the family and its returned adjoint.
pub fn linear_contractivity_constants(model: &Elliptic1DModel) -> Result<(f64, f64, f64, f64)> {
    let cb = model.validate()?;
    let a1 = cb.a0_negative + cb.b_minus_c.powi(2) / cb.nu;
    Ok((a1, cb.c.powi(2) / cb.nu, a1, cb.b.powi(2) / cb.nu))
}

/// Envelope rate `4 c0 d^2 + 4 c0 d^3 / nu` of the weight-conjugated
/// families.
pub fn davies_envelope_omega(c0: f64, d: usize, nu: f64) -> f64 {
    let d = d as f64;
    4.0 * c0 * d * d + 4.0 * c0 * d.powi(3) / nu
}

/// Linear constants of the conjugated form next to their a-priori bounds
/// `2 alpha_1 + rho^2 (1 + 2 d^2 c0 + 4 d^3 c0^2 / nu) + c0 d^2` and
/// `2 alpha_2 + 2 d^3 rho^2 c0^2 / nu` at `d = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConjugatedConstants {
    pub rho: f64,
    pub alpha1: f64,
    pub alpha1_bound: f64,
    pub alpha2: f64,
    pub alpha2_bound: f64,
}

/// Continuum coefficients of `a(e^{-rho psi} u, e^{rho psi} v)`:
/// `b + rho a11 psi'`, `c - rho a11 psi'` and
/// `a0 - rho^2 a11 psi'^2 - rho (b - c) psi'`, evaluated with the cell
/// slopes of `psi` and sampled in time.
pub fn conjugated_constants(model: &Elliptic1DModel, weight: &DaviesWeight, rho: f64) -> Result<ConjugatedConstants> {
    let cb = model.validate()?;
    let coords = model.coords();
    if weight.psi.len() != coords.len() {
        return Err(Error::DimensionMismatch { expected: coords.len(), found: weight.psi.len() });
    }
    let h = model.step();
    let mids = model.midpoints();
    let retained = model.retained();
    let slope = |e: usize| -> f64 {
        let pos = |i: usize| retained.iter().position(|&r| r == i);
        match (pos(e), pos(e + 1)) {
            (Some(i), Some(j)) => (weight.psi[j] - weight.psi[i]) / h,
            _ => 0.0,
        }
    };
    let slopes: Vec<f64> = (0..model.cells).map(slope).collect();
    let times = probe_times(model.schedules(), model.horizon, 129);
    let (mut a0neg, mut bmc, mut csup): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for &t in &times {
        for (e, &x) in mids.iter().enumerate() {
            let (a, b, c, z) = (model.a11.value(t, x), model.b.value(t, x), model.c.value(t, x), model.a0.value(t, x));
            let p = slopes[e];
            let b_r = b + rho * a * p;
            let c_r = c - rho * a * p;
            let z_r = z - rho * rho * a * p * p - rho * (b - c) * p;
            a0neg = a0neg.max(-z_r);
            bmc = bmc.max((b_r - c_r).abs());
            csup = csup.max(c_r.abs());
        }
    }
    let (a1, a2, _, _) = linear_contractivity_constants(model)?;
    let (nu, c0) = (cb.nu, cb.c0);
    Ok(ConjugatedConstants {
        rho,
        alpha1: a0neg + bmc * bmc / nu,
        alpha1_bound: 2.0 * a1 + rho * rho * (1.0 + 2.0 * c0 + 4.0 * c0 * c0 / nu) + c0,
        alpha2: csup * csup / nu,
        alpha2_bound: 2.0 * a2 + 2.0 * rho * rho * c0 * c0 / nu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::davies_perturb;
    use crate::hilbert::{spectral_norm, spectral_summary};

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax()
    }

    #[test]
    fn schedule_integrals_match_quadrature() {
        let scheds = [
            Schedule::constant(2.0),
            Schedule::Piecewise { breaks: vec![0.5, 1.25], values: vec![1.0, 3.0, 0.5] },
            Schedule::Sinusoid { mean: 1.5, amplitude: 0.5, period: 0.7, phase: 0.3 },
        ];
        for sch in &scheds {
            let (a, b) = (0.0, 2.0);
            let n = 200_000;
            let h = (b - a) / n as f64;
            let mid: f64 = (0..n).map(|k| sch.value(a + (k as f64 + 0.5) * h)).sum::<f64>() * h;
            assert!((sch.integral(a, b) - mid).abs() < 1e-6, "{sch:?}");
            assert!((sch.integral(b, a) + mid).abs() < 1e-6);
        }
    }

    #[test]
    fn k2_constant_laplacian() {
        let g = GraphModel {
            nodes: 2,
            edges: vec![GraphEdge { initial: 0, terminal: 1, schedule: 0 }],
            schedules: vec![Schedule::constant(1.0)],
            dirichlet_nodes: vec![],
            max_degree: None,
            coords: None,
            horizon: 1.0,
        };
        let b = build_dynamic_graph(&g).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert_eq!(b.path.evaluate(0.3), want);
        let inc = g.incidence();
        assert_eq!(&inc * inc.transpose(), want);
        assert!(b.disconnected_times.is_empty());
    }

    #[test]
    fn three_path_with_dirichlet_middle() {
        let g = GraphModel {
            nodes: 3,
            edges: vec![
                GraphEdge { initial: 0, terminal: 1, schedule: 0 },
                GraphEdge { initial: 1, terminal: 2, schedule: 1 },
            ],
            schedules: vec![Schedule::constant(2.0), Schedule::constant(5.0)],
            dirichlet_nodes: vec![1],
            max_degree: Some(2),
            coords: None,
            horizon: 1.0,
        };
        let b = build_dynamic_graph(&g).unwrap();
        assert_eq!(b.retained, vec![0, 2]);
        assert_eq!(b.path.evaluate(0.0), DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 5.0]));
    }

    #[test]
    fn poisson_schedule_is_seeded_and_alternating() {
        let a = Schedule::poisson_on_off(3.0, 1.0, 0.0, true, 4.0, 9).unwrap();
        let b = Schedule::poisson_on_off(3.0, 1.0, 0.0, true, 4.0, 9).unwrap();
        assert_eq!(a, b);
        if let Schedule::Piecewise { breaks, values } = &a {
            assert!(!breaks.is_empty());
            assert!(breaks.iter().all(|&t| t > 0.0 && t < 4.0));
            assert!(values.windows(2).all(|w| w[0] != w[1]));
        } else {
            panic!("expected piecewise schedule");
        }
    }

    #[test]
    fn schedule_range_and_csv() {
        let s = Schedule::Sinusoid { mean: 1.5, amplitude: 0.5, period: 2.0, phase: 0.0 };
        let (lo, hi) = s.range(10.0);
        assert!((lo - 1.0).abs() < 1e-14 && (hi - 2.0).abs() < 1e-14);
        let (lo, hi) = s.range(0.25);
        assert!(lo == 1.5 && (hi - s.value(0.25)).abs() < 1e-15);
        let c = Schedule::parse_csv("t,value\n0,1\n0.5,2\n1.5,1\n").unwrap();
        assert_eq!(c.value(0.49), 1.0);
        assert_eq!(c.value(0.5), 2.0);
        assert_eq!(c.range(1.0), (1.0, 2.0));
        assert!(Schedule::parse_csv("1,2\n").is_err());
    }

    #[test]
    fn edge_list_orientation_and_errors() {
        let mut sched = BTreeMap::new();
        sched.insert("one".to_string(), Schedule::constant(1.0));
        let g = GraphModel::from_edge_list("# head, tail, id\n1, 0, one\n2, 1, one\n", None, &sched, 1.0).unwrap();
        assert_eq!(g.nodes, 3);
        assert_eq!(g.edges[0].initial, 0);
        assert_eq!(g.edges[0].terminal, 1);
        let err = GraphModel::from_edge_list("1, 0, two\n", None, &sched, 1.0).unwrap_err();
        assert!(err.to_string().contains("two"));
    }

    #[test]
    fn pagerank_cycle_is_identity_minus_permutation() {
        let g = GraphModel {
            nodes: 3,
            edges: (0..3).map(|i| GraphEdge { initial: i, terminal: (i + 1) % 3, schedule: 0 }).collect(),
            schedules: vec![Schedule::constant(1.0)],
            dirichlet_nodes: vec![],
            max_degree: None,
            coords: None,
            horizon: 1.0,
        };
        let p = build_pagerank(&g).unwrap();
        let a = p.evaluate(0.2);
        let mut want = DMatrix::identity(3, 3);
        for i in 0..3 {
            want[((i + 1) % 3, i)] = -1.0;
        }
        assert_eq!(a, want);
        for j in 0..3 {
            assert_eq!(a.column(j).sum(), 0.0);
        }
    }

    #[test]
    fn pagerank_refuses_dangling_nodes() {
        let mut g = GraphModel {
            nodes: 2,
            edges: vec![GraphEdge { initial: 0, terminal: 1, schedule: 0 }],
            schedules: vec![Schedule::constant(1.0)],
            dirichlet_nodes: vec![],
            max_degree: None,
            coords: None,
            horizon: 1.0,
        };
        match build_pagerank(&g) {
            Err(Error::DanglingNode { node: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        g.edges.push(GraphEdge { initial: 1, terminal: 0, schedule: 1 });
        g.schedules.push(Schedule::Piecewise { breaks: vec![0.5], values: vec![1.0, 0.0] });
        match build_pagerank(&g) {
            Err(Error::DanglingNode { node: 1, t }) => assert!(t >= 0.5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn black_scholes_identity_is_supersolution() {
        let m = BlackScholesModel {
            sigma: Schedule::constant(0.3),
            rate: 0.05,
            x_min: 0.5,
            x_max: 5.0,
            elements: 100,
            horizon: 1.0,
        };
        let p = build_black_scholes(&m).unwrap();
        let a = p.evaluate(0.0);
        let x = nalgebra::DVector::from_vec(m.nodes());
        let ax = &a * &x;
        // exact on interior rows, positive next to the truncation points
        for i in 1..x.len() - 1 {
            assert!(ax[i].abs() < 1e-10, "row {i}: {}", ax[i]);
        }
        assert!(ax[0] > 0.0 && ax[x.len() - 1] > 0.0);
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                if i != j {
                    assert!(a[(i, j)] <= 0.0);
                }
            }
        }
        assert!((m.declared_omega() - (0.09 - 0.075)).abs() < 1e-15);
        let contractive = BlackScholesModel { rate: 0.07, ..m };
        assert_eq!(contractive.declared_omega(), 0.0);
    }

    #[test]
    fn black_scholes_rejects_bad_sigma() {
        let m = BlackScholesModel {
            sigma: Schedule::Piecewise { breaks: vec![0.5], values: vec![0.2, 0.0] },
            rate: 0.05,
            x_min: 0.5,
            x_max: 5.0,
            elements: 10,
            horizon: 1.0,
        };
        assert!(build_black_scholes(&m).is_err());
    }

    #[test]
    fn metric_single_edge_gap() {
        let m = MetricGraphModel::kirchhoff(2, vec![(0, 1)], 64, 1.0);
        let p = build_metric_graph(&m).unwrap();
        assert_eq!(p.dim(), 64);
        let a = p.evaluate(0.0);
        let ones = nalgebra::DVector::from_element(64, 1.0);
        assert!((&a * &ones).amax() < 1e-12);
        let s = spectral_summary(p.space(), &a, Some(&vec![1.0; 64])).unwrap();
        let gap = s.spectral_gap_on_complement.unwrap();
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((gap - pi2).abs() / pi2 < 0.02, "gap {gap}");
    }

    #[test]
    fn metric_star_generator_has_zero_sums() {
        let m = MetricGraphModel::kirchhoff(4, vec![(0, 1), (0, 2), (0, 3)], 9, 1.0);
        let p = build_metric_graph(&m).unwrap();
        let a = p.evaluate(0.0);
        let w = p.space().weights().to_vec();
        for i in 0..a.nrows() {
            assert!(a.row(i).sum().abs() < 1e-12);
            let col: f64 = (0..a.nrows()).map(|k| w[k] * a[(k, i)]).sum();
            assert!(col.abs() < 1e-12);
        }
    }

    #[test]
    fn metric_rank_deficient_basis_rejected() {
        let mut m = MetricGraphModel::kirchhoff(1, vec![(0, 0)], 5, 1.0);
        m.y_basis = Some(vec![vec![1.0, -1.0], vec![-2.0, 2.0]]);
        assert!(build_metric_graph(&m).is_err());
        m.y_basis = Some(vec![vec![1.0, -1.0]]);
        let p = build_metric_graph(&m).unwrap();
        let a = p.evaluate(0.0);
        assert!((0..a.nrows()).any(|i| (0..a.ncols()).any(|j| i != j && a[(i, j)] > 0.0)));
    }

    #[test]
    fn elliptic_omega_p_examples() {
        let m = Elliptic1DModel::constant(20, Boundary::Neumann, 1.0, 0.0, 0.0, 0.5, 1.0);
        for p in [1.5, 2.0, 7.0] {
            assert_eq!(omega_p_bound(&m, p).unwrap(), 0.0);
        }
        assert_eq!(linear_contractivity_constants(&m).unwrap(), (0.0, 0.0, 0.0, 0.0));
        let m = Elliptic1DModel::constant(20, Boundary::Neumann, 1.0, 1.0, 0.0, 0.0, 1.0);
        assert!((omega_p_bound(&m, 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(omega_p_bound(&m, 1.0).is_err());
        assert!(omega_p_bound(&m, f64::INFINITY).is_err());
        assert_eq!(davies_envelope_omega(1.0, 1, 1.0), 8.0);
        let m = Elliptic1DModel::constant(20, Boundary::Neumann, 1.0, 0.0, 1.0, 0.0, 1.0);
        assert_eq!(linear_contractivity_constants(&m).unwrap(), (1.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn conjugated_alpha2_within_bound() {
        let m = Elliptic1DModel { c0: Some(1.0), nu: Some(1.0), ..Elliptic1DModel::constant(20, Boundary::Neumann, 1.0, 0.0, 1.0, 0.0, 1.0) };
        let fam = DaviesWeight::standard_line_family(&m.coords(), &[0.5], 1.0).unwrap();
        for w in &fam {
            let c = conjugated_constants(&m, w, 2.0).unwrap();
            assert!(c.alpha2 <= 10.0 + 1e-12, "{} {}", w.label, c.alpha2);
            assert!(c.alpha2 <= c.alpha2_bound + 1e-12);
        }
    }

    #[test]
    fn elliptic_symmetric_when_b_equals_c() {
        let m = Elliptic1DModel {
            b: Coefficient { time: Schedule::constant(0.7), space: SpatialProfile::Affine { intercept: 1.0, slope: -0.5 } },
            c: Coefficient { time: Schedule::constant(0.7), space: SpatialProfile::Affine { intercept: 1.0, slope: -0.5 } },
            ..Elliptic1DModel::constant(16, Boundary::Dirichlet, 1.0, 0.0, 0.0, 0.3, 1.0)
        };
        let f = m.form_matrix(0.2, None);
        assert!(close(&f, &f.transpose()) < 1e-14);
    }

    #[test]
    fn conjugated_assembly_matches_similarity() {
        for boundary in [Boundary::Neumann, Boundary::Dirichlet] {
            let m = Elliptic1DModel {
                a11: Coefficient {
                    time: Schedule::Sinusoid { mean: 1.5, amplitude: 0.3, period: 1.0, phase: 0.2 },
                    space: SpatialProfile::Cosine { offset: 1.0, amplitude: 0.2, wavenumber: 3.0, phase: 0.0 },
                },
                b: Coefficient { time: Schedule::constant(0.8), space: SpatialProfile::Affine { intercept: 0.5, slope: 1.0 } },
                c: Coefficient::constant(-0.4),
                a0: Coefficient::constant(0.2),
                ..Elliptic1DModel::constant(40, boundary, 1.0, 0.0, 0.0, 0.0, 1.0)
            };
            let base = build_elliptic_1d(&m).unwrap();
            let fam = DaviesWeight::standard_line_family(&m.coords(), &[0.3, 0.7], 0.25).unwrap();
            for w in &fam {
                for rho in [-4.0, -1.0, 0.5, 3.0] {
                    let direct = m.build_conjugated(w, rho).unwrap();
                    let sim = davies_perturb(&base, w, rho).unwrap();
                    for t in [0.0, 0.37, 0.9] {
                        let (a, b) = (direct.evaluate(t), sim.evaluate(t));
                        let scale = spectral_norm(&b).max(1.0);
                        assert!(close(&a, &b) <= 1e-9 * scale, "{} rho={rho} t={t}: {}", w.label, close(&a, &b));
                    }
                }
            }
        }
    }
}

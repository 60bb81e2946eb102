//! Scenario files: a versioned TOML description of a model, its schedules,
//! the evaluation grid and the checks to run, and the runner that turns one
//! into a deterministic report bundle.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::forms::{estimate_form_constants, omega_profile, DaviesWeight, FormConstants, OperatorPath};
use crate::hilbert::{log_norm, operator_norm, NormIndex};
use crate::kernels::{
    davies_sweep, default_dt_grid, estimate_nash_constant, kernel_matrix, nash_ultracontractivity_bound,
    reference_kernel_z, verify_gaussian_domination, DaviesSweepConfig, KernelBoundFit,
};
use crate::models::{
    build_black_scholes, build_dynamic_graph, build_elliptic_1d, build_metric_graph, build_pagerank,
    davies_envelope_omega, omega_p_bound, BlackScholesModel, Boundary, Coefficient, Elliptic1DModel,
    GraphEdge, GraphModel, MetricGraphFlags, MetricGraphModel, Schedule, SpatialProfile,
};
use crate::properties::{
    check_domination, check_linf_l1_contractivity, check_longtime_outcome, check_lp_quasi_contractivity,
    check_positivity, check_quasi_contractivity, check_rescaling_identity, check_returned_adjoint_identity,
    check_stochastic, check_uniform_exponential_stability, criterion_linf_l1, criterion_positivity,
    equilibrium, time_pairs, EquilibriumOutcome, PropertyReport, Verdict, Witness,
};
use crate::propagator::{propagate_to_tolerance, propagate_to_tolerance_aligned, Propagator};

pub const SCHEMA_VERSION: u32 = 1;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_INVALID_INPUT: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("internal error: {0}")]
    Internal(#[source] Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Invalid(_) => EXIT_INVALID_INPUT,
            RunError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

type Outcome<T> = std::result::Result<T, RunError>;

fn invalid(field: &str) -> impl Fn(Error) -> RunError + '_ {
    move |e| RunError::Invalid(format!("{field}: {e}"))
}

/// Errors raised while a check runs: bad parameters and violated model
/// assumptions are input problems, everything else is internal.
fn from_check(name: &str, e: Error) -> RunError {
    match e {
        Error::InvalidInput(_)
        | Error::DimensionMismatch { .. }
        | Error::EllipticityLost(_)
        | Error::DanglingNode { .. }
        | Error::UnsupportedNormPair { .. } => RunError::Invalid(format!("checks.{name}: {e}")),
        other => RunError::Internal(other),
    }
}

// ------------------------------------------------------------- schema

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub runtime_budget_seconds: f64,
    pub horizon: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub schedules: BTreeMap<String, ScheduleSpec>,
    pub model: ModelSpec,
    pub checks: Vec<String>,
    #[serde(default)]
    pub lp: LpParams,
    #[serde(default)]
    pub longtime: LongtimeParams,
    #[serde(default)]
    pub stability: StabilityParams,
    #[serde(default)]
    pub davies: DaviesParams,
    #[serde(default)]
    pub nash: NashParams,
    #[serde(default)]
    pub gaussian: GaussianParams,
}

fn default_tolerance() -> f64 {
    1e-8
}

/// Evaluation grid on `[0, T]`: explicit `times`, or `points` uniform nodes.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub times: Option<Vec<f64>>,
    pub points: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant {
        value: f64,
    },
    Piecewise {
        breaks: Vec<f64>,
        values: Vec<f64>,
    },
    Sinusoid {
        mean: f64,
        amplitude: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
    /// On/off switching with exponential holding times; drawn once with the
    /// scenario horizon and seed.
    Poisson {
        rate: f64,
        on: f64,
        off: f64,
        #[serde(default = "yes")]
        start_on: bool,
        seed: Option<u64>,
    },
    /// `t, value` rows from a file next to the scenario, or inline `data`.
    Csv {
        path: Option<PathBuf>,
        data: Option<String>,
    },
}

fn yes() -> bool {
    true
}

/// A schedule id or a constant value.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ScheduleRef {
    Value(f64),
    Id(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum CoefficientSpec {
    Value(f64),
    Id(String),
    Full(FullCoefficient),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullCoefficient {
    pub schedule: ScheduleRef,
    #[serde(default)]
    pub space: SpatialProfile,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub nodes: Option<usize>,
    /// `[initial, terminal, schedule]` triples.
    #[serde(default)]
    pub edges: Vec<(usize, usize, ScheduleRef)>,
    /// Edge-list file (`head, tail, schedule-id` per line), relative to the
    /// scenario file.
    pub edge_list: Option<PathBuf>,
    #[serde(default)]
    pub dirichlet: Vec<usize>,
    pub max_degree: Option<usize>,
    pub coords: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    DynamicGraph(GraphSpec),
    Pagerank(GraphSpec),
    /// Truncated integer lattice with Dirichlet ends.
    Lattice(LatticeSpec),
    BlackScholes(BlackScholesSpec),
    MetricGraph(MetricGraphSpec),
    Elliptic1d(EllipticSpec),
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::DynamicGraph(_) => "dynamic_graph",
            ModelSpec::Pagerank(_) => "pagerank",
            ModelSpec::Lattice(_) => "lattice",
            ModelSpec::BlackScholes(_) => "black_scholes",
            ModelSpec::MetricGraph(_) => "metric_graph",
            ModelSpec::Elliptic1d(_) => "elliptic1d",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub radius: usize,
    pub weight: ScheduleRef,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlackScholesSpec {
    pub sigma: ScheduleRef,
    pub rate: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub elements: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricGraphSpec {
    pub vertices: usize,
    pub edges: Vec<(usize, usize)>,
    pub points_per_edge: usize,
    /// One schedule per edge, or a single one shared by all edges.
    #[serde(default = "unit_refs")]
    pub conductance: Vec<ScheduleRef>,
    #[serde(default = "zero_refs")]
    pub potential: Vec<ScheduleRef>,
    pub y_basis: Option<Vec<Vec<f64>>>,
    #[serde(default = "zero_ref")]
    pub sigma: ScheduleRef,
    pub sigma_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default = "yes")]
    pub generalized_ideal: bool,
    #[serde(default = "yes")]
    pub cv_invariant: bool,
}

fn unit_refs() -> Vec<ScheduleRef> {
    vec![ScheduleRef::Value(1.0)]
}
fn zero_refs() -> Vec<ScheduleRef> {
    vec![ScheduleRef::Value(0.0)]
}
fn zero_ref() -> ScheduleRef {
    ScheduleRef::Value(0.0)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipticSpec {
    #[serde(default = "unit_interval")]
    pub domain: (f64, f64),
    pub cells: usize,
    pub boundary: Boundary,
    pub a11: CoefficientSpec,
    #[serde(default = "zero_coefficient")]
    pub b: CoefficientSpec,
    #[serde(default = "zero_coefficient")]
    pub c: CoefficientSpec,
    #[serde(default = "zero_coefficient")]
    pub a0: CoefficientSpec,
    pub nu: Option<f64>,
    pub c0: Option<f64>,
}

fn unit_interval() -> (f64, f64) {
    (0.0, 1.0)
}
fn zero_coefficient() -> CoefficientSpec {
    CoefficientSpec::Value(0.0)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LpParams {
    pub p: Vec<f64>,
    pub samples: usize,
}

impl Default for LpParams {
    fn default() -> Self {
        Self { p: vec![2.0, 4.0, 8.0, 16.0], samples: 1000 }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LongtimeParams {
    pub t0: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityParams {
    /// Defaults to half the horizon.
    pub t0: Option<f64>,
    pub nodes: usize,
}

impl Default for StabilityParams {
    fn default() -> Self {
        Self { t0: None, nodes: 8 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaviesParams {
    pub rho: Vec<f64>,
    pub dt: Option<Vec<f64>>,
    /// Centres of the clipped distance weights; defaults to the midpoint.
    pub centres: Option<Vec<f64>>,
    /// Clipping radius; defaults to half the coordinate range.
    pub radius: Option<f64>,
    pub beta: f64,
    pub alpha: Option<f64>,
    pub form_samples: usize,
}

impl Default for DaviesParams {
    fn default() -> Self {
        Self {
            rho: (-4..=4).map(f64::from).collect(),
            dt: None,
            centres: None,
            radius: None,
            beta: 1.0,
            alpha: None,
            form_samples: 8,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NashParams {
    pub mu: f64,
    pub dt: Option<Vec<f64>>,
    pub form_samples: usize,
}

impl Default for NashParams {
    fn default() -> Self {
        Self { mu: 1.0, dt: None, form_samples: 16 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianParams {
    pub dt: Option<Vec<f64>>,
    pub s: f64,
    pub tolerance: f64,
}

impl Default for GaussianParams {
    fn default() -> Self {
        Self { dt: None, s: 0.0, tolerance: 1e-8 }
    }
}

// ------------------------------------------------------------- checks

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckId {
    QuasiContractivity,
    RescalingIdentity,
    ReturnedAdjointIdentity,
    Positivity,
    SubMarkovian,
    Stochastic,
    LpQuasiContractivity,
    Domination,
    LongtimeConvergence,
    UniformExponentialStability,
    GaussianDomination,
    DaviesSweep,
    NashUltracontractivity,
}

pub struct CheckInfo {
    pub id: CheckId,
    pub name: &'static str,
    pub statement: &'static str,
    pub formula: &'static str,
    pub applies_to: &'static str,
}

pub const CHECKS: &[CheckInfo] = &[
    CheckInfo {
        id: CheckId::QuasiContractivity,
        name: "quasi_contractivity",
        statement: "propagator growth controlled by the accretivity shift of the generator",
        formula: "||U(t,s)||_2 <= exp(int_s^t omega(r) dr) + 1e-9, omega(t) = max eig of -(A(t) + A(t)^*)/2",
        applies_to: "all models",
    },
    CheckInfo {
        id: CheckId::RescalingIdentity,
        name: "rescaling_identity",
        statement: "shifting the generator by omega rescales the propagator",
        formula: "U_omega(t,s) = exp(-omega (t-s)) U(t,s) to 1e-10, with A_omega = A + omega I",
        applies_to: "all models",
    },
    CheckInfo {
        id: CheckId::ReturnedAdjointIdentity,
        name: "returned_adjoint_identity",
        statement: "the propagator of the time-reversed adjoint path is the adjoint with reflected times",
        formula: "U(t,s) = V(T-s, T-t)^* to 1e-10, V generated by t -> A(T-t)^*",
        applies_to: "all models",
    },
    CheckInfo {
        id: CheckId::Positivity,
        name: "positivity",
        statement: "generator criterion (off-diagonals of A(t) nonpositive) and positivity of the propagator",
        formula: "min_ij U(t,s)_ij >= -1e-10",
        applies_to: "all models",
    },
    CheckInfo {
        id: CheckId::SubMarkovian,
        name: "sub_markovian",
        statement: "generator criteria and L^inf / L^1 contractivity of the propagator",
        formula: "||U(t,s)||_{inf->inf} <= 1 + 1e-9 and ||U(t,s)||_{1->1} <= 1 + 1e-9",
        applies_to: "all models",
    },
    CheckInfo {
        id: CheckId::Stochastic,
        name: "stochastic",
        statement: "mass conservation of the generator and of the propagator",
        formula: "1^T W A(t) = 0 and sum_i w_i U(t,s)_ij / w_j = 1 within 1e-9",
        applies_to: "all models",
    },
    CheckInfo {
        id: CheckId::LpQuasiContractivity,
        name: "lp_quasi_contractivity",
        statement: "Monte-Carlo L^p bounds; elliptic models use the coefficient formula, others the larger of the L^1 and L^inf logarithmic norms",
        formula: "||U(t,s) f||_p <= exp(omega_p (t-s)) ||f||_p; elliptic: p >= 2: a0- + (1/p + 1/2)|b-c|^2/nu + p|c|^2/nu, p < 2: a0- + (1/2 + (p-1)/p)|b-c|^2/nu + p|b|^2/(nu (p-1))",
        applies_to: "all models",
    },
    CheckInfo {
        id: CheckId::Domination,
        name: "domination",
        statement: "Dirichlet propagator dominated by the propagator without boundary nodes",
        formula: "|U_D(t,s)_ij| <= U(t,s)_ij + 1e-10 after extension by zero",
        applies_to: "dynamic_graph and lattice with Dirichlet nodes, elliptic1d with Dirichlet boundary",
    },
    CheckInfo {
        id: CheckId::LongtimeConvergence,
        name: "longtime_convergence",
        statement: "convergence to the common kernel projector at the rate of the spectral gap",
        formula: "||U(t,t0) - P||_2 <= ||I - P|| exp(-int_t0^t gap(r) dr) + 1e-8",
        applies_to: "models whose generators share a one-dimensional kernel",
    },
    CheckInfo {
        id: CheckId::UniformExponentialStability,
        name: "uniform_exponential_stability",
        statement: "exponential decay beyond t0 when the running averages of omega are negative",
        formula: "||U(t,s)|| <= M exp((t - t0) Omega) for s <= t0 <= t",
        applies_to: "all models",
    },
    CheckInfo {
        id: CheckId::GaussianDomination,
        name: "gaussian_domination",
        statement: "truncated lattice kernel dominated by the heat kernel on the integers",
        formula: "0 <= Gamma(t,s;n1,n2) <= G(int_s^t w; n1, n2) + 1e-8, G(r; k) = (1/pi) int_0^pi exp(-2r(1 - cos th)) cos(k th) dth",
        applies_to: "lattice",
    },
    CheckInfo {
        id: CheckId::DaviesSweep,
        name: "davies_sweep",
        statement: "exponentially conjugated propagators, quadratic envelope of their rates and the resulting pointwise Gaussian bound",
        formula: "||U_rho(t,s)||_{1->inf} <= c (t-s)^{-n/2} exp(w (1 + rho^2)(t-s)) => |Gamma| <= c e^{w(t-s)} (t-s)^{-n/2} exp(-b d^2/(t-s)), b = beta^2/(4w); elliptic: omega_rho <= (4 c0 + 4 c0/nu)(1 + rho^2)",
        applies_to: "models with node coordinates",
    },
    CheckInfo {
        id: CheckId::NashUltracontractivity,
        name: "nash_ultracontractivity",
        statement: "L^1 -> L^inf bound from a Nash inequality with a numerically estimated constant",
        formula: "||U(t,s)||_{1->inf} <= (mu C_N / (4 alpha))^{mu/2} (t-s)^{-mu/2} exp(max(omega, omega_tilde)(t-s))",
        applies_to: "all models with a positive ellipticity constant",
    },
];

fn normalize(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace('-', "_")
}

/// The registry entry for `name` (hyphens and underscores are equivalent),
/// or the closest known names.
pub fn lookup_check(name: &str) -> std::result::Result<&'static CheckInfo, Vec<&'static str>> {
    let key = normalize(name);
    if let Some(c) = CHECKS.iter().find(|c| c.name == key) {
        return Ok(c);
    }
    Err(suggest(&key, CHECKS.iter().map(|c| c.name)))
}

fn suggest(key: &str, names: impl Iterator<Item = &'static str>) -> Vec<&'static str> {
    let mut scored: Vec<(f64, &'static str)> = names
        .map(|n| {
            let prefix = if n.starts_with(key) || key.starts_with(n) { 1.0 } else { 0.0 };
            (strsim::jaro_winkler(key, n) + prefix, n)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    scored.into_iter().take(3).map(|(_, n)| n).collect()
}

pub fn describe(info: &CheckInfo) -> String {
    format!(
        "{}\n  {}\n  bound: {}\n  applies to: {}\n",
        info.name, info.statement, info.formula, info.applies_to
    )
}

// ------------------------------------------------------------ bundled

pub const BUNDLED: &[(&str, &str)] = &[
    ("k2-dynamic", include_str!("../scenarios/k2-dynamic.toml")),
    ("z-lattice-domination", include_str!("../scenarios/z-lattice-domination.toml")),
    ("graph-schedules", include_str!("../scenarios/graph-schedules.toml")),
    ("path-dirichlet-poisson", include_str!("../scenarios/path-dirichlet-poisson.toml")),
    ("pagerank-cycle", include_str!("../scenarios/pagerank-cycle.toml")),
    ("black-scholes", include_str!("../scenarios/black-scholes.toml")),
    ("metric-single-edge", include_str!("../scenarios/metric-single-edge.toml")),
    ("metric-star", include_str!("../scenarios/metric-star.toml")),
    ("elliptic-lp", include_str!("../scenarios/elliptic-lp.toml")),
    ("elliptic-davies", include_str!("../scenarios/elliptic-davies.toml")),
    ("interval-nash", include_str!("../scenarios/interval-nash.toml")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn bundled_suggestions(name: &str) -> Vec<&'static str> {
    suggest(name, BUNDLED.iter().map(|(n, _)| *n))
}

// ------------------------------------------------------------ loading

#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    /// Directory for relative file references; `None` for bundled text.
    pub base_dir: Option<PathBuf>,
    pub source: String,
}

pub fn parse(text: &str, base_dir: Option<PathBuf>, source: impl Into<String>) -> Outcome<LoadedScenario> {
    let source = source.into();
    let scenario: Scenario = toml::from_str(text).map_err(|e| RunError::Invalid(format!("{source}: {e}")))?;
    Ok(LoadedScenario { scenario, base_dir, source })
}

pub fn load_file(path: &Path) -> Outcome<LoadedScenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunError::Invalid(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(|p| p.to_path_buf()).unwrap_or_default();
    parse(&text, Some(base), path.display().to_string())
}

/// A scenario file path, or the name of a bundled scenario.
pub fn load(spec: &str) -> Outcome<LoadedScenario> {
    let path = Path::new(spec);
    if path.exists() {
        return load_file(path);
    }
    match bundled(spec) {
        Some(text) => parse(text, None, format!("bundled:{spec}")),
        None => Err(RunError::Invalid(format!(
            "{spec}: no such file or bundled scenario; closest bundled: {}",
            bundled_suggestions(spec).join(", ")
        ))),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub tolerance_override: Option<f64>,
    pub seed_override: Option<u64>,
}

// ----------------------------------------------------------- building

struct Context<'a> {
    schedules: BTreeMap<String, Schedule>,
    horizon: f64,
    base_dir: Option<&'a Path>,
}

impl Context<'_> {
    fn resolve(&self, r: &ScheduleRef, field: &str) -> Outcome<Schedule> {
        match r {
            ScheduleRef::Value(v) => Ok(Schedule::constant(*v)),
            ScheduleRef::Id(id) => self.schedules.get(id).cloned().ok_or_else(|| {
                let known: Vec<&str> = self.schedules.keys().map(|k| k.as_str()).collect();
                RunError::Invalid(format!("{field}: unknown schedule '{id}' (defined: {})", known.join(", ")))
            }),
        }
    }

    fn coefficient(&self, c: &CoefficientSpec, field: &str) -> Outcome<Coefficient> {
        Ok(match c {
            CoefficientSpec::Value(v) => Coefficient::constant(*v),
            CoefficientSpec::Id(id) => Coefficient {
                time: self.resolve(&ScheduleRef::Id(id.clone()), field)?,
                space: SpatialProfile::Uniform,
            },
            CoefficientSpec::Full(f) => Coefficient {
                time: self.resolve(&f.schedule, &format!("{field}.schedule"))?,
                space: f.space.clone(),
            },
        })
    }

    fn file(&self, rel: &Path, field: &str) -> Outcome<String> {
        let path = match (rel.is_absolute(), self.base_dir) {
            (true, _) => rel.to_path_buf(),
            (false, Some(base)) => base.join(rel),
            (false, None) => {
                return Err(RunError::Invalid(format!(
                    "{field}: relative path {} needs a scenario file",
                    rel.display()
                )))
            }
        };
        std::fs::read_to_string(&path).map_err(|e| RunError::Invalid(format!("{field}: {}: {e}", path.display())))
    }
}

fn fnv(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn materialize(
    id: &str,
    spec: &ScheduleSpec,
    horizon: f64,
    seed: u64,
    base_dir: Option<&Path>,
) -> Outcome<Schedule> {
    let field = format!("schedules.{id}");
    let s = match spec {
        ScheduleSpec::Constant { value } => Schedule::constant(*value),
        ScheduleSpec::Piecewise { breaks, values } => Schedule::Piecewise { breaks: breaks.clone(), values: values.clone() },
        ScheduleSpec::Sinusoid { mean, amplitude, period, phase } => Schedule::Sinusoid {
            mean: *mean,
            amplitude: *amplitude,
            period: *period,
            phase: *phase,
        },
        ScheduleSpec::Poisson { rate, on, off, start_on, seed: own } => {
            let seed = own.unwrap_or(seed ^ fnv(id));
            Schedule::poisson_on_off(*rate, *on, *off, *start_on, horizon, seed).map_err(invalid(&field))?
        }
        ScheduleSpec::Csv { path, data } => {
            let text = match (path, data) {
                (Some(p), None) => {
                    let ctx = Context { schedules: BTreeMap::new(), horizon, base_dir };
                    ctx.file(p, &format!("{field}.path"))?
                }
                (None, Some(d)) => d.clone(),
                _ => return Err(RunError::Invalid(format!("{field}: give exactly one of 'path' and 'data'"))),
            };
            Schedule::parse_csv(&text).map_err(invalid(&field))?
        }
    };
    s.validate().map_err(invalid(&field))?;
    Ok(s)
}

/// An assembled model with what the checks need besides the path.
struct Built {
    path: OperatorPath,
    /// Path without Dirichlet nodes and the embedding of the retained nodes.
    dominating: Option<(OperatorPath, Vec<usize>)>,
    elliptic: Option<Elliptic1DModel>,
    lattice_weight: Option<Schedule>,
    notes: Vec<String>,
}

fn graph_model(spec: &GraphSpec, ctx: &Context) -> Outcome<GraphModel> {
    let mut model = match &spec.edge_list {
        Some(file) => {
            if !spec.edges.is_empty() {
                return Err(RunError::Invalid("model: give either 'edges' or 'edge_list', not both".into()));
            }
            let text = ctx.file(file, "model.edge_list")?;
            GraphModel::from_edge_list(&text, spec.nodes, &ctx.schedules, ctx.horizon)
                .map_err(invalid("model.edge_list"))?
        }
        None => {
            let nodes = spec
                .nodes
                .ok_or_else(|| RunError::Invalid("model.nodes: required with inline edges".into()))?;
            let mut table: Vec<Schedule> = Vec::new();
            let mut edges = Vec::with_capacity(spec.edges.len());
            for (k, (a, b, r)) in spec.edges.iter().enumerate() {
                let sched = ctx.resolve(r, &format!("model.edges[{k}]"))?;
                let idx = match table.iter().position(|s| *s == sched) {
                    Some(i) => i,
                    None => {
                        table.push(sched);
                        table.len() - 1
                    }
                };
                edges.push(GraphEdge { initial: *a, terminal: *b, schedule: idx });
            }
            GraphModel {
                nodes,
                edges,
                schedules: table,
                dirichlet_nodes: Vec::new(),
                max_degree: None,
                coords: None,
                horizon: ctx.horizon,
            }
        }
    };
    model.dirichlet_nodes = spec.dirichlet.clone();
    model.max_degree = spec.max_degree;
    model.coords = spec.coords.clone();
    model.validate().map_err(invalid("model"))?;
    Ok(model)
}

fn build_graph(model: &GraphModel) -> Outcome<Built> {
    let built = build_dynamic_graph(model).map_err(invalid("model"))?;
    let mut notes = Vec::new();
    if !built.disconnected_times.is_empty() {
        notes.push(format!(
            "graph disconnected at {} probe times (first t = {})",
            built.disconnected_times.len(),
            built.disconnected_times[0]
        ));
    }
    let dominating = if model.dirichlet_nodes.is_empty() {
        None
    } else {
        let full = build_dynamic_graph(&model.without_dirichlet()).map_err(invalid("model"))?;
        let emb = built
            .retained
            .iter()
            .map(|v| full.retained.iter().position(|w| w == v).expect("all nodes retained"))
            .collect();
        Some((full.path, emb))
    };
    Ok(Built { path: built.path, dominating, elliptic: None, lattice_weight: None, notes })
}

fn build_model(spec: &ModelSpec, ctx: &Context) -> Outcome<Built> {
    let horizon = ctx.horizon;
    match spec {
        ModelSpec::DynamicGraph(g) => build_graph(&graph_model(g, ctx)?),
        ModelSpec::Lattice(l) => {
            let w = ctx.resolve(&l.weight, "model.weight")?;
            let model = GraphModel::truncated_lattice(l.radius, w.clone(), horizon);
            model.validate().map_err(invalid("model"))?;
            let mut b = build_graph(&model)?;
            b.lattice_weight = Some(w);
            Ok(b)
        }
        ModelSpec::Pagerank(g) => {
            let model = graph_model(g, ctx)?;
            let path = build_pagerank(&model).map_err(invalid("model"))?;
            Ok(Built { path, dominating: None, elliptic: None, lattice_weight: None, notes: Vec::new() })
        }
        ModelSpec::BlackScholes(b) => {
            let model = BlackScholesModel {
                sigma: ctx.resolve(&b.sigma, "model.sigma")?,
                rate: b.rate,
                x_min: b.x_min,
                x_max: b.x_max,
                elements: b.elements,
                horizon,
            };
            let path = build_black_scholes(&model).map_err(invalid("model"))?;
            let notes = vec![format!("declared omega = {}", model.declared_omega())];
            Ok(Built { path, dominating: None, elliptic: None, lattice_weight: None, notes })
        }
        ModelSpec::MetricGraph(m) => {
            let refs = |v: &[ScheduleRef], f: &str| -> Outcome<Vec<Schedule>> {
                v.iter().enumerate().map(|(k, r)| ctx.resolve(r, &format!("model.{f}[{k}]"))).collect()
            };
            let model = MetricGraphModel {
                vertices: m.vertices,
                edges: m.edges.clone(),
                points_per_edge: m.points_per_edge,
                conductance: refs(&m.conductance, "conductance")?,
                potential: refs(&m.potential, "potential")?,
                y_basis: m.y_basis.clone(),
                sigma: ctx.resolve(&m.sigma, "model.sigma")?,
                sigma_matrix: m.sigma_matrix.clone(),
                flags: MetricGraphFlags { generalized_ideal: m.generalized_ideal, cv_invariant: m.cv_invariant },
                horizon,
            };
            let path = build_metric_graph(&model).map_err(invalid("model"))?;
            let notes = vec![format!(
                "vertex-space flags declared: generalized_ideal = {}, cv_invariant = {}",
                m.generalized_ideal, m.cv_invariant
            )];
            Ok(Built { path, dominating: None, elliptic: None, lattice_weight: None, notes })
        }
        ModelSpec::Elliptic1d(e) => {
            let model = Elliptic1DModel {
                domain: e.domain,
                cells: e.cells,
                boundary: e.boundary,
                a11: ctx.coefficient(&e.a11, "model.a11")?,
                b: ctx.coefficient(&e.b, "model.b")?,
                c: ctx.coefficient(&e.c, "model.c")?,
                a0: ctx.coefficient(&e.a0, "model.a0")?,
                nu: e.nu,
                c0: e.c0,
                horizon,
            };
            model.validate().map_err(invalid("model"))?;
            let path = build_elliptic_1d(&model).map_err(invalid("model"))?;
            let dominating = if model.boundary == Boundary::Dirichlet {
                let full = Elliptic1DModel { boundary: Boundary::Neumann, ..model.clone() };
                let p = build_elliptic_1d(&full).map_err(invalid("model"))?;
                Some((p, model.retained()))
            } else {
                None
            };
            Ok(Built { path, dominating, elliptic: Some(model), lattice_weight: None, notes: Vec::new() })
        }
    }
}

// ---------------------------------------------------------- preparing

/// A validated scenario with its model assembled.
pub struct Prepared {
    pub scenario: Scenario,
    pub source: String,
    checks: Vec<CheckId>,
    grid: Vec<f64>,
    schedules: BTreeMap<String, Schedule>,
    built: Built,
}

impl Prepared {
    pub fn path(&self) -> &OperatorPath {
        &self.built.path
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Materialized schedule table, keyed by id.
    pub fn schedules(&self) -> &BTreeMap<String, Schedule> {
        &self.schedules
    }
}

fn check_positive(v: f64, field: &str) -> Outcome<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(RunError::Invalid(format!("{field}: must be positive and finite, got {v}")))
    }
}

fn check_dts(dts: &[f64], horizon: f64, field: &str) -> Outcome<()> {
    if dts.is_empty() {
        return Err(RunError::Invalid(format!("{field}: must not be empty")));
    }
    for (k, &dt) in dts.iter().enumerate() {
        if !(dt > 0.0 && dt <= horizon) {
            return Err(RunError::Invalid(format!(
                "{field}[{k}] = {dt} is outside (0, horizon] = (0, {horizon}]"
            )));
        }
    }
    Ok(())
}

pub fn prepare(loaded: &LoadedScenario, opts: &RunOptions) -> Outcome<Prepared> {
    let mut sc = loaded.scenario.clone();
    if let Some(t) = opts.tolerance_override {
        sc.tolerance = t;
    }
    if let Some(s) = opts.seed_override {
        sc.seed = s;
    }
    if sc.schema_version != SCHEMA_VERSION {
        return Err(RunError::Invalid(format!(
            "schema_version: unsupported version {} (expected {SCHEMA_VERSION})",
            sc.schema_version
        )));
    }
    if sc.name.trim().is_empty() {
        return Err(RunError::Invalid("name: must not be empty".into()));
    }
    check_positive(sc.horizon, "horizon")?;
    check_positive(sc.tolerance, "tolerance")?;
    check_positive(sc.runtime_budget_seconds, "runtime_budget_seconds")?;
    let horizon = sc.horizon;

    let grid = match (&sc.grid.times, sc.grid.points) {
        (Some(_), Some(_)) => return Err(RunError::Invalid("grid: give either 'times' or 'points', not both".into())),
        (Some(times), None) => {
            for (k, &t) in times.iter().enumerate() {
                if !(t >= 0.0 && t <= horizon) {
                    return Err(RunError::Invalid(format!(
                        "grid.times[{k}] = {t} is outside [0, horizon] = [0, {horizon}]"
                    )));
                }
            }
            let mut g = times.clone();
            g.sort_by(f64::total_cmp);
            g.dedup();
            if g.len() < 2 {
                return Err(RunError::Invalid("grid.times: need at least two distinct times".into()));
            }
            g
        }
        (None, points) => {
            let n = points.unwrap_or(11);
            if n < 2 {
                return Err(RunError::Invalid(format!("grid.points: need at least 2, got {n}")));
            }
            crate::properties::grid(0.0, horizon, n)
        }
    };

    let mut checks = Vec::with_capacity(sc.checks.len());
    if sc.checks.is_empty() {
        return Err(RunError::Invalid("checks: list at least one check".into()));
    }
    for (k, name) in sc.checks.iter().enumerate() {
        match lookup_check(name) {
            Ok(info) => {
                if checks.contains(&info.id) {
                    return Err(RunError::Invalid(format!("checks[{k}]: '{name}' listed twice")));
                }
                checks.push(info.id);
            }
            Err(close) => {
                return Err(RunError::Invalid(format!(
                    "checks[{k}]: unknown check '{name}'; did you mean {}?",
                    close.join(", ")
                )))
            }
        }
    }

    for (k, &p) in sc.lp.p.iter().enumerate() {
        if !(p > 1.0 && p.is_finite()) {
            return Err(RunError::Invalid(format!("lp.p[{k}] = {p}: need 1 < p < inf")));
        }
    }
    if let Some(dt) = &sc.davies.dt {
        check_dts(dt, horizon, "davies.dt")?;
    }
    if let Some(dt) = &sc.nash.dt {
        check_dts(dt, horizon, "nash.dt")?;
    }
    if let Some(dt) = &sc.gaussian.dt {
        check_dts(dt, horizon - sc.gaussian.s, "gaussian.dt")?;
    }
    check_positive(sc.nash.mu, "nash.mu")?;
    check_positive(sc.davies.beta, "davies.beta")?;
    if !(sc.longtime.t0 >= 0.0 && sc.longtime.t0 < horizon) {
        return Err(RunError::Invalid(format!("longtime.t0 = {} is outside [0, horizon)", sc.longtime.t0)));
    }
    if let Some(t0) = sc.stability.t0 {
        if !(t0 > 0.0 && t0 < horizon) {
            return Err(RunError::Invalid(format!("stability.t0 = {t0} is outside (0, horizon)")));
        }
    }
    if !(sc.gaussian.s >= 0.0 && sc.gaussian.s < horizon) {
        return Err(RunError::Invalid(format!("gaussian.s = {} is outside [0, horizon)", sc.gaussian.s)));
    }

    let base_dir = loaded.base_dir.as_deref();
    let mut schedules = BTreeMap::new();
    for (id, spec) in &sc.schedules {
        schedules.insert(id.clone(), materialize(id, spec, horizon, sc.seed, base_dir)?);
    }
    let ctx = Context { schedules, horizon, base_dir };
    let built = build_model(&sc.model, &ctx)?;
    let schedules = ctx.schedules;

    for (k, id) in checks.iter().enumerate() {
        let name = sc.checks[k].as_str();
        let reject = |why: &str| Err(RunError::Invalid(format!("checks[{k}]: '{name}' {why}")));
        match id {
            CheckId::GaussianDomination if built.lattice_weight.is_none() => {
                return reject("requires model kind 'lattice'")
            }
            CheckId::Domination if built.dominating.is_none() => {
                return reject("requires Dirichlet nodes or a Dirichlet boundary")
            }
            CheckId::DaviesSweep if built.path.space().coords().is_none() => {
                return reject("requires node coordinates")
            }
            _ => {}
        }
    }

    Ok(Prepared { scenario: sc, source: loaded.source.clone(), checks, grid, schedules, built })
}

// ------------------------------------------------------------ running

/// A plot-ready table written as `<name>.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn write(&self, dir: &Path) -> crate::Result<()> {
        let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", self.name)))?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckRecord {
    pub check: String,
    pub holds: bool,
    pub reports: Vec<PropertyReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropagatorSummary {
    pub subintervals: usize,
    pub converged: bool,
    pub refinements: usize,
    pub tolerance: f64,
}

/// Deterministic run report: no timings, fixed key order.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub schema_version: u32,
    pub scenario: String,
    pub model: String,
    pub dimension: usize,
    pub horizon: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub grid: Vec<f64>,
    pub propagator: PropagatorSummary,
    pub form_constants: Option<FormConstants>,
    pub checks: Vec<CheckRecord>,
    pub kernel_fit: Option<KernelBoundFit>,
    pub notes: Vec<String>,
    pub passed: bool,
}

pub struct RunOutput {
    pub report: ScenarioReport,
    pub tables: Vec<Table>,
}

impl RunOutput {
    pub fn exit_code(&self) -> i32 {
        if self.report.passed {
            EXIT_PASS
        } else {
            EXIT_CHECK_FAILED
        }
    }

    pub fn report_json(&self) -> crate::Result<String> {
        Ok(serde_json::to_string_pretty(&self.report)? + "\n")
    }

    pub fn summary(&self) -> String {
        let r = &self.report;
        let mut s = format!(
            "scenario {} ({}, dimension {}, horizon {})\n",
            r.scenario, r.model, r.dimension, r.horizon
        );
        for c in &r.checks {
            s += &format!("{} {}\n", if c.holds { "PASS" } else { "FAIL" }, c.check);
            for rep in &c.reports {
                let verdict = match rep.verdict {
                    Verdict::Holds => "holds",
                    Verdict::Fails => "fails",
                    Verdict::NotApplicable => "not applicable",
                };
                s += &format!(
                    "    {}: {verdict}; measured {:e} vs bound {:e}, margin {:e}, {} samples",
                    rep.property_name, rep.bound_measured, rep.bound_requested, rep.margin, rep.samples_used
                );
                if let Some(reason) = &rep.reason {
                    s += &format!(" ({reason})");
                }
                s += "\n";
            }
        }
        if let Some(f) = &r.kernel_fit {
            s += &format!(
                "kernel fit: c = {:e}, n = {:.4}, omega = {:.6}, b = {}, residual = {:e}\n",
                f.c,
                f.n,
                f.omega,
                f.b.map(|b| format!("{b:.6}")).unwrap_or_else(|| "absent".into()),
                f.residual
            );
        }
        for n in &r.notes {
            s += &format!("note: {n}\n");
        }
        s += &format!("overall: {}\n", if r.passed { "PASS" } else { "FAIL" });
        s
    }

    /// Writes `report.json`, `summary.txt` and the CSV tables into `dir`.
    pub fn write(&self, dir: &Path) -> crate::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.report_json()?)?;
        std::fs::write(dir.join("summary.txt"), self.summary())?;
        for t in &self.tables {
            t.write(dir)?;
        }
        Ok(())
    }
}

struct CheckResult {
    record: CheckRecord,
    tables: Vec<Table>,
    fit: Option<KernelBoundFit>,
}

fn verdict_record(name: &str, reports: Vec<PropertyReport>) -> CheckRecord {
    let holds = !reports.is_empty() && reports.iter().all(|r| r.holds());
    CheckRecord { check: name.into(), holds, reports }
}

struct Runner<'a> {
    p: &'a Prepared,
    prop: Propagator,
    pairs: Vec<(f64, f64)>,
}

impl Runner<'_> {
    fn sc(&self) -> &Scenario {
        &self.p.scenario
    }

    fn nash_dts(&self) -> Vec<f64> {
        self.sc().nash.dt.clone().unwrap_or_else(|| default_dt_grid(self.sc().horizon))
    }

    fn gaussian_dts(&self) -> Vec<f64> {
        let g = &self.sc().gaussian;
        g.dt.clone().unwrap_or_else(|| default_dt_grid(self.sc().horizon - g.s))
    }

    fn run(&self, id: CheckId) -> crate::Result<CheckResult> {
        let info = CHECKS.iter().find(|c| c.id == id).expect("registered");
        let path = &self.p.built.path;
        let grid = &self.p.grid;
        let mut tables = Vec::new();
        let mut fit = None;
        let reports = match id {
            CheckId::QuasiContractivity => {
                let omega = omega_profile(path, grid)?;
                let rep = check_quasi_contractivity(&self.prop, &omega, &self.pairs)?;
                let mut t = Table::new("quasi_contractivity", &["t", "s", "norm", "bound"]);
                let space = path.space();
                for &(tt, s) in &self.pairs {
                    let n = operator_norm(space, &self.prop.evaluate(tt, s)?, NormIndex::Two, NormIndex::Two)?;
                    t.rows.push(vec![tt, s, n, omega.integral(s, tt).exp()]);
                }
                tables.push(t);
                vec![rep]
            }
            CheckId::RescalingIdentity => {
                let omega = omega_profile(path, grid)?.sup().max(0.0) + 1.0;
                vec![check_rescaling_identity(&self.prop, omega, &self.pairs)?]
            }
            CheckId::ReturnedAdjointIdentity => vec![check_returned_adjoint_identity(&self.prop, &self.pairs)?],
            CheckId::Positivity => {
                vec![criterion_positivity(path, grid), check_positivity(&self.prop, &self.pairs)?]
            }
            CheckId::SubMarkovian => {
                let [ci, c1] = criterion_linf_l1(path, grid)?;
                let [pi, p1] = check_linf_l1_contractivity(&self.prop, &self.pairs)?;
                vec![ci, c1, pi, p1]
            }
            CheckId::Stochastic => check_stochastic(&self.prop, grid, &self.pairs)?.to_vec(),
            CheckId::LpQuasiContractivity => self.lp()?,
            CheckId::Domination => {
                let (dom_path, emb) = self.p.built.dominating.as_ref().expect("validated");
                let dom = propagate_to_tolerance_aligned(dom_path, 0.0, self.sc().horizon, self.sc().tolerance, grid)?;
                vec![check_domination(&self.prop, &dom, Some(emb), &self.pairs, self.sc().seed)?]
            }
            CheckId::LongtimeConvergence => {
                let t0 = self.sc().longtime.t0;
                let times: Vec<f64> = grid.iter().cloned().filter(|&t| t >= t0).collect();
                let outcome = equilibrium(path, 32, grid)?;
                let mut rep = check_longtime_outcome(&self.prop, &outcome, t0, &times)?;
                if let EquilibriumOutcome::Found(eq) = &outcome {
                    let gap_inf = eq.gap_profile.values.iter().cloned().fold(f64::INFINITY, f64::min);
                    rep.details.insert("gap_inf".into(), gap_inf);
                    let mut t = Table::new("longtime_convergence", &["t", "distance", "bound"]);
                    let space = path.space();
                    let ip = DMatrix::<f64>::identity(space.dim(), space.dim()) - &eq.projector;
                    let ip_norm = operator_norm(space, &ip, NormIndex::Two, NormIndex::Two)?;
                    for &tt in &times {
                        let d = operator_norm(
                            space,
                            &(self.prop.evaluate(tt, t0)? - &eq.projector),
                            NormIndex::Two,
                            NormIndex::Two,
                        )?;
                        t.rows.push(vec![tt, d, ip_norm * (-eq.gap_profile.integral(t0, tt)).exp()]);
                    }
                    tables.push(t);
                }
                vec![rep]
            }
            CheckId::UniformExponentialStability => {
                let omega = omega_profile(path, grid)?;
                let t0 = self.sc().stability.t0.unwrap_or(0.5 * self.sc().horizon);
                vec![check_uniform_exponential_stability(&self.prop, &omega, t0, self.sc().stability.nodes)?]
            }
            CheckId::GaussianDomination => self.gaussian()?,
            CheckId::DaviesSweep => {
                let (reps, f, t) = self.davies()?;
                fit = Some(f);
                tables.push(t);
                reps
            }
            CheckId::NashUltracontractivity => {
                let (rep, t) = self.nash()?;
                tables.push(t);
                vec![rep]
            }
        };
        Ok(CheckResult { record: verdict_record(info.name, reports), tables, fit })
    }

    fn lp(&self) -> crate::Result<Vec<PropertyReport>> {
        let sc = self.sc();
        let path = &self.p.built.path;
        let horizon = sc.horizon;
        let mut out = Vec::new();
        // Riesz-Thorin rate for non-elliptic models
        let interpolated = if self.p.built.elliptic.is_none() {
            let space = path.space();
            let mut times = path.sample_times(64);
            times.extend_from_slice(&self.p.grid);
            let mut w = f64::NEG_INFINITY;
            for t in times {
                let a = -path.evaluate(t);
                w = w.max(log_norm(space, &a, NormIndex::One)?).max(log_norm(space, &a, NormIndex::Inf)?);
            }
            Some(w)
        } else {
            None
        };
        for &p in &sc.lp.p {
            let omega = match (&self.p.built.elliptic, interpolated) {
                (Some(m), _) => omega_p_bound(m, p)?,
                (None, Some(w)) => w,
                _ => unreachable!(),
            };
            let prof = crate::forms::ScalarProfile::constant(horizon, omega);
            let mut r = check_lp_quasi_contractivity(&self.prop, p, &prof, &self.pairs, sc.lp.samples, sc.seed)?;
            r.details.insert("omega_p".into(), omega);
            out.push(r);
        }
        Ok(out)
    }

    fn gaussian(&self) -> crate::Result<Vec<PropertyReport>> {
        let w = self.p.built.lattice_weight.clone().expect("validated");
        let s = self.sc().gaussian.s;
        let reference = move |dt: f64, x: f64, y: f64| -> crate::Result<f64> {
            reference_kernel_z(w.integral(s, s + dt), x.round() as i64, y.round() as i64)
        };
        let dts = self.gaussian_dts();
        let rep = verify_gaussian_domination(&self.prop, &reference, &dts, s, self.sc().gaussian.tolerance)?;
        Ok(vec![rep])
    }

    fn davies(&self) -> crate::Result<(Vec<PropertyReport>, KernelBoundFit, Table)> {
        let sc = self.sc();
        let d = &sc.davies;
        let path = &self.p.built.path;
        let coords = path.space().coords().expect("validated").to_vec();
        let (lo, hi) = (coords[0], *coords.last().expect("non-empty"));
        let centres = d.centres.clone().unwrap_or_else(|| vec![0.5 * (lo + hi)]);
        let radius = d.radius.unwrap_or(0.5 * (hi - lo));
        let family = DaviesWeight::standard_line_family(&coords, &centres, radius)?;
        let cfg = DaviesSweepConfig {
            rho_grid: d.rho.clone(),
            dt_grid: d.dt.clone().unwrap_or_else(|| default_dt_grid(sc.horizon)),
            beta: d.beta,
            tolerance: sc.tolerance,
            alpha: d.alpha,
            form_samples: d.form_samples,
        };
        let fit = davies_sweep(path, &family, &cfg)?;
        let mut reports = Vec::new();

        let mut env = PropertyReport::new("davies_envelope");
        for x in &fit.samples {
            let bound = (fit.c.ln() - 0.5 * fit.n * x.dt.ln() + fit.omega * (1.0 + x.rho * x.rho) * x.dt).exp();
            env.record(x.norm_1_inf, bound, 1e-12 * bound, Witness { t: Some(x.s + x.dt), s: Some(x.s), value: x.rho, ..Default::default() });
        }
        env.detail("omega_envelope", fit.omega_envelope);
        reports.push(env);

        if let Some(m) = &self.p.built.elliptic {
            let b = m.validate()?;
            let omega0 = davies_envelope_omega(b.c0, 1, b.nu);
            let mut rates = PropertyReport::new("davies_rate_envelope");
            for r in &fit.rates {
                let bound = omega0 * (1.0 + r.rho * r.rho);
                rates.record(r.omega, bound, 0.0, Witness { value: r.rho, ..Default::default() });
            }
            rates.detail("omega0", omega0);
            reports.push(rates);
        }

        let mut g = PropertyReport::new("gaussian_bound");
        g.record(fit.residual, 0.0, 0.0, Witness { value: fit.residual, ..Default::default() });
        g.detail("c", fit.c);
        g.detail("n", fit.n);
        g.detail("omega", fit.omega);
        if let Some(b) = fit.b {
            g.detail("b", b);
        }
        if fit.b.is_none() {
            g.reason = Some("decay b absent: no perturbed samples or zero rate".into());
        }
        reports.push(g);

        let mut t = Table::new("davies_sweep", &["rho", "s", "dt", "norm_1_inf", "envelope"]);
        for x in &fit.samples {
            let envelope = (fit.c.ln() - 0.5 * fit.n * x.dt.ln() + fit.omega * (1.0 + x.rho * x.rho) * x.dt).exp();
            t.rows.push(vec![x.rho, x.s, x.dt, x.norm_1_inf, envelope]);
        }
        Ok((reports, fit, t))
    }

    fn nash(&self) -> crate::Result<(PropertyReport, Table)> {
        let sc = self.sc();
        let path = &self.p.built.path;
        let space = path.space();
        let fc = estimate_form_constants(path, sc.nash.form_samples)?;
        let nash = estimate_nash_constant(space, sc.nash.mu, sc.seed)?;
        let mut times = path.sample_times(64);
        times.extend_from_slice(&self.p.grid);
        let mut omega_tilde = f64::NEG_INFINITY;
        for t in times {
            let a = -path.evaluate(t);
            omega_tilde = omega_tilde
                .max(log_norm(space, &a, NormIndex::One)?)
                .max(log_norm(space, &a, NormIndex::Inf)?);
        }
        let mut rep = PropertyReport::new("nash_ultracontractivity");
        rep.seed = Some(sc.seed);
        let mut t = Table::new("nash_ultracontractivity", &["dt", "norm_1_inf", "bound"]);
        for dt in self.nash_dts() {
            let u = self.prop.evaluate(dt, 0.0)?;
            let m = operator_norm(space, &u, NormIndex::One, NormIndex::Inf)?;
            let b = nash_ultracontractivity_bound(fc.alpha, nash.constant, sc.nash.mu, fc.omega, omega_tilde, dt)?;
            rep.record(m, b, 1e-9 * b, Witness { t: Some(dt), s: Some(0.0), value: m, ..Default::default() });
            t.rows.push(vec![dt, m, b]);
        }
        rep.detail("nash_constant", nash.constant);
        rep.detail("mu", sc.nash.mu);
        rep.detail("alpha", fc.alpha);
        rep.detail("omega", fc.omega);
        rep.detail("omega_tilde", omega_tilde);
        Ok((rep, t))
    }
}

/// Builds the propagator on `[0, T]` and runs every requested check;
/// independent checks run concurrently, the report keeps the listed order.
pub fn execute(p: &Prepared) -> Outcome<RunOutput> {
    let sc = &p.scenario;
    let horizon = sc.horizon;
    let mut nodes = p.grid.clone();
    if p.checks.contains(&CheckId::NashUltracontractivity) {
        nodes.extend(sc.nash.dt.clone().unwrap_or_else(|| default_dt_grid(horizon)));
    }
    if p.checks.contains(&CheckId::GaussianDomination) {
        let s = sc.gaussian.s;
        nodes.push(s);
        nodes.extend(sc.gaussian.dt.clone().unwrap_or_else(|| default_dt_grid(horizon - s)).iter().map(|d| s + d));
    }
    nodes.retain(|&t| t > 0.0 && t < horizon);
    let prop = propagate_to_tolerance_aligned(&p.built.path, 0.0, horizon, sc.tolerance, &nodes)
        .map_err(|e| from_check("propagator", e))?;
    let runner = Runner { p, pairs: time_pairs(&p.grid), prop };

    let results: Vec<CheckResult> = p
        .checks
        .par_iter()
        .map(|&id| {
            let name = CHECKS.iter().find(|c| c.id == id).expect("registered").name;
            runner.run(id).map_err(|e| from_check(name, e))
        })
        .collect::<Outcome<_>>()?;

    let mut notes = p.built.notes.clone();
    let form_constants = match estimate_form_constants(&p.built.path, 16) {
        Ok(fc) => Some(fc),
        Err(e) => {
            notes.push(format!("form constants unavailable: {e}"));
            None
        }
    };
    if matches!(sc.model, ModelSpec::DynamicGraph(_) | ModelSpec::Lattice(_) | ModelSpec::Pagerank(_))
        && p.checks.contains(&CheckId::DaviesSweep)
    {
        notes.push("Gaussian bounds use the coordinate distance in place of a Euclidean metric".into());
    }

    let mut checks = Vec::new();
    let mut tables = Vec::new();
    let mut kernel_fit = None;
    for r in results {
        checks.push(r.record);
        tables.extend(r.tables);
        if r.fit.is_some() {
            kernel_fit = r.fit;
        }
    }
    let passed = checks.iter().all(|c| c.holds);
    let prop = &runner.prop;
    let report = ScenarioReport {
        schema_version: SCHEMA_VERSION,
        scenario: sc.name.clone(),
        model: sc.model.kind().into(),
        dimension: p.built.path.dim(),
        horizon,
        tolerance: sc.tolerance,
        seed: sc.seed,
        grid: p.grid.clone(),
        propagator: PropagatorSummary {
            subintervals: prop.partition().subintervals(),
            converged: prop.converged(),
            refinements: prop.refinement_history().len(),
            tolerance: sc.tolerance,
        },
        form_constants,
        checks,
        kernel_fit,
        notes,
        passed,
    };
    Ok(RunOutput { report, tables })
}

pub fn run(loaded: &LoadedScenario, opts: &RunOptions) -> Outcome<RunOutput> {
    execute(&prepare(loaded, opts)?)
}

/// Kernel `Gamma(t, s)` of a scenario's model, with the integer-lattice
/// reference as bound column for lattice models.
pub fn export_kernel(loaded: &LoadedScenario, opts: &RunOptions, t: f64, s: f64, file: &Path) -> Outcome<()> {
    let mut sc = loaded.scenario.clone();
    sc.checks = vec!["quasi_contractivity".into()];
    let p = prepare(&LoadedScenario { scenario: sc, ..loaded.clone() }, opts)?;
    let horizon = p.scenario.horizon;
    if !(s >= 0.0 && s < t && t <= horizon) {
        return Err(RunError::Invalid(format!("--t/--s: need 0 <= s < t <= horizon = {horizon}, got s = {s}, t = {t}")));
    }
    let prop = propagate_to_tolerance(&p.built.path, s, t, p.scenario.tolerance).map_err(|e| from_check("export", e))?;
    let gamma = kernel_matrix(&prop, t, s).map_err(RunError::Internal)?;
    let space = p.built.path.space();
    let result = match &p.built.lattice_weight {
        Some(w) => {
            let r = w.integral(s, t);
            let bound = move |x: f64, y: f64| reference_kernel_z(r, x.round() as i64, y.round() as i64).unwrap_or(f64::NAN);
            crate::kernels::export_kernel_csv(file, space, t, s, &gamma, Some(&bound))
        }
        None => crate::kernels::export_kernel_csv(file, space, t, s, &gamma, None),
    };
    result.map_err(RunError::Internal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(extra: &str) -> String {
        format!(
            r#"
schema_version = 1
name = "t"
runtime_budget_seconds = 5
horizon = 1.0
checks = ["positivity"]
{extra}
[model]
kind = "dynamic_graph"
nodes = 2
edges = [[0, 1, 1.0]]
"#
        )
    }

    #[test]
    fn grid_point_beyond_horizon_names_field() {
        let text = minimal("[grid]\ntimes = [0.0, 0.5, 2.0]");
        let l = parse(&text, None, "x").unwrap();
        let e = prepare(&l, &RunOptions::default()).err().unwrap();
        assert_eq!(e.exit_code(), EXIT_INVALID_INPUT);
        assert!(e.to_string().contains("grid.times[2]"), "{e}");
    }

    #[test]
    fn unknown_field_is_rejected_with_location() {
        let text = minimal("horizn = 2.0");
        let e = parse(&text, None, "x").err().unwrap();
        assert!(e.to_string().contains("horizn"), "{e}");
        assert!(e.to_string().contains("line"), "{e}");
    }

    #[test]
    fn unknown_schedule_reference_names_edge() {
        let text = minimal("").replace("[[0, 1, 1.0]]", "[[0, 1, \"m\"]]");
        let l = parse(&text, None, "x").unwrap();
        let e = prepare(&l, &RunOptions::default()).err().unwrap();
        assert!(e.to_string().contains("model.edges[0]"), "{e}");
    }

    #[test]
    fn check_lookup_accepts_hyphens_and_suggests() {
        assert_eq!(lookup_check("quasi-contractivity").unwrap().id, CheckId::QuasiContractivity);
        let close = lookup_check("positivty").err().unwrap();
        assert_eq!(close[0], "positivity");
    }

    #[test]
    fn every_bundled_scenario_parses_and_validates() {
        assert!(BUNDLED.len() >= 8);
        for (name, text) in BUNDLED {
            let l = parse(text, None, *name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(l.scenario.name, *name);
            prepare(&l, &RunOptions::default()).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn csv_schedule_needs_exactly_one_source() {
        let text = minimal("[schedules.m]\nkind = \"csv\"");
        let l = parse(&text, None, "x").unwrap();
        let e = prepare(&l, &RunOptions::default()).err().unwrap();
        assert!(e.to_string().contains("schedules.m"), "{e}");
    }
}

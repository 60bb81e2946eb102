use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("unsupported norm pair ({p_in}, {p_out}); supported pairs: {supported}")]
    UnsupportedNormPair {
        p_in: String,
        p_out: String,
        supported: String,
    },

    #[error("symmetric eigensolver did not converge")]
    EigenNonConvergence,

    #[error("adaptive quadrature did not reach tolerance; worst subintervals {worst:?}")]
    QuadratureNonConvergence { worst: Vec<(f64, f64)> },

    #[error("refinement cap of {cap} subintervals reached; last difference {last_difference:e}")]
    RefinementCap {
        cap: usize,
        last_difference: f64,
        history: Vec<crate::propagator::RefinementStep>,
    },

    #[error("ODE step size underflow at t = {t}")]
    StepUnderflow { t: f64 },

    #[error("dangling node {node}: zero out-degree at t = {t}")]
    DanglingNode { node: usize, t: f64 },

    #[error("ellipticity lost: {0}")]
    EllipticityLost(String),

    #[error("constant estimate unbounded: {0}")]
    Unbounded(String),

    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("scenario parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

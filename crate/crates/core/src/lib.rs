//! Propagators of non-autonomous linear evolution equations `u' + A(t) u = 0`
//! built as product integrals of averaged generators, together with checks
//! of qualitative properties (contractivity, positivity, domination,
//! long-time behaviour) and kernel bounds.

pub mod error;
pub mod forms;
pub mod hilbert;
pub mod kernels;
pub mod models;
pub mod properties;
pub mod scenario;
pub mod propagator;
mod quadrature;

pub use error::{Error, Result};

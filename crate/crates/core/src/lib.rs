//! Cross-polarization (CP) dynamics for a heteronuclear I–S spin pair under
//! magic-angle spinning.
//!
//! The crate is split along the lines of the computation:
//!
//! - [`coupling`]: domain types, the MAS-modulated dipolar coupling `d(t)`,
//!   its exact time integral, and off-resonance effective-field geometry.
//! - [`analytic`]: closed-form transfer efficiency and the relaxation-damped
//!   magnetization model.
//! - [`powder`]: orientation ensembles and deterministic powder averaging.
//! - [`oracle`]: a 4×4 density-matrix propagator of the full two-spin
//!   Hamiltonian, plus the zero-/double-quantum decomposition.
//! - [`fit`]: build-up curve ingestion, Levenberg–Marquardt fitting, and
//!   coupling/distance conversion.
//!
//! Internally every angular frequency is in rad/s, every time in seconds and
//! every angle in radians. [`units`] holds the boundary conversions.

pub mod analytic;
pub mod coupling;
mod error;
pub mod fit;
pub mod oracle;
pub mod powder;
pub mod units;

pub use error::{Error, Result};

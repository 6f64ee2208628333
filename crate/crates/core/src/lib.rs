//! Finite-difference simulator for a chemotaxis-Navier-Stokes system with
//! logistic growth, regularized in the Yosida fashion, together with a
//! diagnostics engine for its Lyapunov-type functionals.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod chemotaxis;
pub mod config;
pub mod diagnostics;
pub mod driver;
pub mod fluid;
pub mod grid;
mod linsolve;
pub mod operators;
pub mod storage;

pub use chemotaxis::{ReactionParams, StepError};
pub use config::{parse_config, ConfigError, RunConfig};
pub use diagnostics::{DiagnosticsRecord, Violation, YParams};
pub use driver::{run, DriverError, RunResult, SimParams};
pub use fluid::ForcingSpec;
pub use grid::{make_domain, Domain, DomainSpec, GridError, ScalarField, SimState, VectorField};
pub use linsolve::SolverError;
pub use operators::{PoissonSolverConfig, SolverMethod};
pub use storage::StorageError;

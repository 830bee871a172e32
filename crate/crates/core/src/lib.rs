//! Entropic optimal transport on countable discrete spaces.
//!
//! The crate covers measures with tail models, cost families with dominating
//! functions, a log-domain Sinkhorn solver, derivatives of the entropic plan,
//! plug-in limit variances and resampling experiments. The `erot` binary
//! exposes these through a command line interface.

pub mod cli;
pub mod costs;
pub mod error;
pub mod measures;
pub mod resampling;
pub mod sensitivity;
pub mod sinkhorn;

pub use costs::{build_cost, CostModel, CostSpec, WeightProfile};
pub use error::{Error, Result};
pub use measures::{DiscreteMeasure, IndexedSpace, SignedVector};
pub use sinkhorn::{solve, SinkhornSolution, SolverConfig};

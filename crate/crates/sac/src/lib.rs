//! Sequential-action control for nonlinear control-affine systems, with
//! first-order hybrid (impulsive reset) extensions, fixed-step integration,
//! and the benchmark plants used by the test suite.

pub mod benchmarks;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod hybrid;
pub mod integrator;
pub mod objectives;

pub use error::{Result, SacError};

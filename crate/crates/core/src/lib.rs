//! Numerical laboratory for flows and linear transport/continuity equations
//! driven by one-sided Lipschitz velocity fields, in both the compressive and
//! expansive time directions, with constant-noise second-order extensions.

pub mod error;
pub mod field;
pub mod flow;
pub mod grid;
pub mod jacobian;
pub mod measure;

pub use error::{Error, Result};

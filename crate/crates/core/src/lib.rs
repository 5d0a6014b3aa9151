//! Estimation of misspecified dynamic discrete choice models by K-stage
//! policy iteration: model primitives, data generating processes, the ML and
//! minimum-distance estimators, and their local-misspecification asymptotics.
#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod asymptotics;
pub mod dgp;
pub mod error;
pub mod estimate;
pub mod linalg;
mod math;
pub mod model;
pub mod rng;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use model::{CcpMatrix, ModelSpec, EULER_GAMMA};

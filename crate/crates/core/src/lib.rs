//! Numerical toolkit for Anosov endomorphisms of the 2-torus.
//!
//! The crate evaluates degree-k toral endomorphisms and their lifts,
//! computes stable and unstable bundles, periodic data and shadowing orbits,
//! solves the cohomological equation for the unstable Jacobian, builds
//! conformal leaf metrics and SRB densities, and constructs conjugacies to
//! the linearization by three independent routes.

pub mod bundles;
pub mod conjugacy;
pub mod error;
pub mod grid;
pub mod leaf;
pub mod linalg;
pub mod livsic;
pub mod model;
pub mod parallel;
pub mod periodic;
pub mod shadowing;
pub mod srb;
pub mod stats;
pub mod torus;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use grid::GridField;
pub use model::{ModelFile, ModelKind, ToralEndomorphism};
pub use torus::{LiftPoint, TorusPoint};

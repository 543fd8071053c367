//! Structural-causal optimal transport.
//!
//! The crate computes classical, relaxed structural-causal and exact factored
//! Wasserstein distances between empirical distributions generated by
//! additive-noise structural causal models, and provides ambiguity-set tools
//! for distributionally robust evaluation.
//!
//! - [`scm`]: models, the reduced-form map `g` and its inverse, sampling.
//! - [`ot`]: costs, exact and entropic OT, grid plans and their entropies.
//! - [`relaxed`]: the KL-relaxed structural distance and its DC solver.
//! - [`dro`]: ambiguity radii, ball samplers, worst-case losses, rate experiments.
//! - [`estimation`]: least-squares structural equations and stability curves.

pub mod dist;
pub mod dro;
pub mod error;
pub mod estimation;
pub mod io;
pub mod ot;
pub mod relaxed;
pub mod scm;

pub use dist::{DiscreteDistribution, Marginal};
pub use error::{Error, Result};

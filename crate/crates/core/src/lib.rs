//! Robust, possibly non-concave, multi-period stochastic control under
//! Wasserstein and parametric ambiguity.
//!
//! The crate is organised bottom-up:
//!
//! * [`measures`]: discrete measures and exact Wasserstein distances,
//! * [`ambiguity`]: reference kernels, radii and ambiguity sets,
//! * [`controls`]: path-dependent admissible action sets,
//! * [`dp`]: the exact robust dynamic programming recursion and a
//!   brute-force oracle,
//! * [`neural`]: network approximations of the recursion,
//! * [`hedging`]: the prospect-theory hedging application,
//! * [`bounds`]: stability and ambiguity-gap bounds,
//! * [`instances`]: problem generators for oracles and audits.

pub mod ambiguity;
pub mod bounds;
pub mod controls;
pub mod dp;
pub mod error;
pub mod geometry;
pub mod hedging;
pub mod instances;
pub mod measures;
pub mod neural;

pub use error::{Error, Result};

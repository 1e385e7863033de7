//! Design and evaluation of risk-aware feedback controllers for
//! discrete-time convex systems under uncertainty.
//!
//! The crate covers the full pipeline:
//!
//! - [`expr`] / [`analyze`]: expression trees with a conservative curvature
//!   and monotonicity calculus;
//! - [`system`] / [`rollout`]: structured dynamics (affine + convex blocks),
//!   trajectory simulation, and the stacked affine-block maps;
//! - [`certify`]: the convex-system certificate and the concave-dynamics
//!   sign flip;
//! - [`risk`]: coherent risk measures on samples, with exact tail-sort CVaR
//!   and the epigraph transform;
//! - [`purify`]: purifier families and the bijection between output-feedback
//!   and purified-output-feedback policies;
//! - [`policy`]: open-loop, output-feedback and basis-parameterized
//!   policies;
//! - [`program`] / [`solve`]: scenario-approximated convex programs with
//!   reverse-mode subgradients and an exact-penalty subgradient solver;
//! - [`controllers`]: the suboptimal control methods (Q-design and MPC
//!   variants) plus closed-loop Monte Carlo evaluation;
//! - [`benchmark`]: the numerical benchmark system, its scenario
//!   distributions and purifier;
//! - [`scenario_io`]: CSV/JSON scenario batch formats.

pub mod analyze;
pub mod certify;
pub mod expr;
pub mod policy;
pub mod purify;
pub mod risk;
pub mod rollout;
pub mod system;

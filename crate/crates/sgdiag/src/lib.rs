//! Constant-rate stochastic gradient descent with a convergence
//! diagnostic.
//!
//! SGD with a constant learning rate converges fast at first, then stops
//! improving: the iterates reach a stationary region around the optimum
//! whose radius scales with the rate, and bounce around inside it. This
//! crate detects that transition online, from the iterates alone, by
//! accumulating inner products of successive stochastic gradients —
//! negative drift in that statistic is the signature of the stationary
//! phase. On top of the detector it builds a rate-halving variant of
//! (implicit) SGD that restarts the statistic after each halving, so the
//! rate decays geometrically exactly when the chain has mixed at the
//! current rate.
//!
//! The pieces:
//!
//! - [`model`]: GLM-family losses (quadratic, logistic, custom transfer),
//!   data points, gradients.
//! - [`engine`]: explicit and implicit single steps, run loops with
//!   divergence handling, tracing, and pluggable monitors.
//! - [`diagnostic`]: the gradient inner-product statistic, its burn-in
//!   gate, and the activation latch.
//! - [`halving`]: the rate-halving driver built on the detector.
//! - [`region`]: where the detector activates as a function of the
//!   parameter, mapped over a grid, plus the empirical region the iterates
//!   actually occupy.
//! - [`harness`]: simulated problems, the detector-quality study,
//!   budget-matched comparisons against tuned baselines, dataset loading,
//!   and run manifests.
//!
//! Everything that draws random numbers takes an explicit seed and is
//! deterministic given it, across platforms and thread counts.

pub mod diagnostic;
pub mod engine;
pub mod error;
pub mod generate;
pub mod halving;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod region;

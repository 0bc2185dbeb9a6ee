//! Convex Q-learning toolkit.
//!
//! The optimal Q-function of a discounted MDP is the value-maximal solution of
//! a set of linear inequalities, so Q-function approximation can be posed as a
//! convex program over the parameter vector instead of a fixed-point
//! iteration.  This crate implements that pipeline end to end:
//!
//! * [`mdp`]: finite MDP models, value iteration, invariant distributions.
//! * [`features`]: linear Q parameterizations and temporal-difference terms.
//! * [`simulate`]: trajectory generation under randomized behavior policies.
//! * [`lp`]: a dense simplex solver with KKT-certified reports.
//! * [`cvxq`]: sampled convex-programming solvers for Q-learning, in plain
//!   and variance-reduced ("relative") forms.
//! * [`qlearn`]: stochastic-approximation Q-learning baselines.
//! * [`batch_pd`]: batch primal-dual iterations for the same saddle problem.
//! * [`variance`]: asymptotic-covariance estimators and a synthetic
//!   constraint laboratory for validating the central limit theory.
//! * [`inventory`]: an inventory-control benchmark with a known optimal
//!   threshold policy.
//!
//! Heavy experiment loops (replicated runs, parameter sweeps) run on a rayon
//! pool when the default `parallel` feature is enabled and fall back to plain
//! iterators without it; results are identical either way.

pub mod batch_pd;
pub mod cvxq;
pub mod features;
pub mod lp;
pub mod mdp;
pub mod oracle;
pub mod parallel;
pub mod qlearn;
pub mod inventory;
pub mod simulate;
pub mod stats;
pub mod variance;

//! Convex Q-learning: pose Q-function approximation as a linear program over
//! the parameter vector, with constraints assembled from trajectory data.
//!
//! For each eligibility component i the data yields one moment constraint
//! `ḡ_N^i(θ) = (1/N) Σ_k ζ_k^i · (θ'ψ_k - c_k - γ min_u θ'ψ(x_{k+1},u)) ≤ 0`,
//! a convex (max-of-affine) function of θ.  Two equivalent solvers are
//! provided: an epigraph lift that makes the whole system one LP, and a
//! cutting-plane loop that adds the constraint blocks of greedy policies
//! lazily.  A "relative" variant subtracts `δ ⟨ω, Q^θ⟩` from the temporal
//! difference, which recenters the Q-function and reduces estimator variance
//! without moving the greedy policy.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::features::{dot, FeatureMap};
use crate::lp::{self, LinearProgram, LpError, SolveStatus};
use crate::mdp::FiniteMdp;
use crate::parallel;
use crate::simulate::Trajectory;

/// Constraint violations above this threshold trigger another cut round.
pub const CUT_VIOLATION_TOL: f64 = 1e-8;

/// Tightness threshold for empirical constraints (their right side is 0).
pub const GALERKIN_TOL: f64 = 1e-7;

const DEFAULT_CUT_LIMIT: usize = 1000;
const ASSEMBLY_CHUNK: usize = 4096;

#[derive(Debug)]
pub enum CvxqError {
    Lp(LpError),
    IterationLimit { cuts: usize },
    MissingRelativeData,
}

impl std::fmt::Display for CvxqError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CvxqError::Lp(e) => write!(f, "{e}"),
            CvxqError::IterationLimit { cuts } => {
                write!(f, "constraint generation did not settle after {cuts} cut rounds")
            }
            CvxqError::MissingRelativeData => {
                write!(f, "constraint system has no relative (δ, ω) data")
            }
        }
    }
}

impl std::error::Error for CvxqError {}

impl From<LpError> for CvxqError {
    fn from(e: LpError) -> Self {
        CvxqError::Lp(e)
    }
}

/// One weighted transition term of the empirical constraint function.
#[derive(Debug, Clone)]
pub struct StepTerm {
    pub weight: f64,
    pub psi: Vec<f64>,
    pub cost: f64,
    pub zeta: Vec<f64>,
    /// ψ(x_{k+1}, u) for every action u.
    pub next_psi: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RelativeData {
    pub delta: f64,
    /// `Σ_z ω(z) ψ(z)` for the recentring pmf ω.
    pub omega_feature_mean: Vec<f64>,
}

/// Empirical (or exact, when built from a model) constraint data for the
/// convex program.  Steps whose eligibility vector is identically zero are
/// dropped at construction; they contribute nothing to any constraint, but
/// the weight normalization still reflects the full horizon.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    pub gamma: f64,
    pub d: usize,
    pub const_d: usize,
    pub n_actions: usize,
    /// Raw horizon N behind the weights (1 for exact systems).
    pub n_steps: usize,
    pub steps: Vec<StepTerm>,
    pub mu_feature_mean: Vec<f64>,
    /// Largest cost seen in the data; feeds the default box radius.
    pub max_cost: f64,
    pub relative: Option<RelativeData>,
}

impl ConstraintSystem {
    /// Assembles sampled constraints from a trajectory: every step gets
    /// weight 1/N.
    pub fn from_trajectory<S>(
        traj: &Trajectory<S>,
        features: &FeatureMap<S>,
        gamma: f64,
        mu_feature_mean: Vec<f64>,
    ) -> Self {
        assert!(!traj.steps.is_empty());
        assert!(gamma > 0.0 && gamma < 1.0);
        assert_eq!(mu_feature_mean.len(), features.d());
        let n = traj.steps.len();
        let w = 1.0 / n as f64;
        let mut max_cost = 0.0f64;
        let mut steps = Vec::with_capacity(n);
        for s in &traj.steps {
            max_cost = max_cost.max(s.cost.abs());
            let zeta = features.zeta(&s.state, s.action);
            debug_assert!(zeta.iter().all(|v| *v >= 0.0), "eligibility vectors must be nonnegative");
            if zeta.iter().all(|v| *v == 0.0) {
                continue;
            }
            let psi = features.psi(&s.state, s.action);
            let next_psi: Vec<Vec<f64>> =
                (0..features.n_actions()).map(|u| features.psi(&s.next_state, u)).collect();
            steps.push(StepTerm { weight: w, psi, cost: s.cost, zeta, next_psi });
        }
        ConstraintSystem {
            gamma,
            d: features.d(),
            const_d: features.const_d(),
            n_actions: features.n_actions(),
            n_steps: n,
            steps,
            mu_feature_mean,
            max_cost,
            relative: None,
        }
    }

    /// Exact steady-state constraints for a finite model: one term per
    /// `(x, u, x')` with weight `ϖ(x,u) P_u(x,x')`, so the weighted sums
    /// reproduce the stationary expectation instead of a Monte Carlo average.
    pub fn exact_tabular(
        mdp: &FiniteMdp,
        features: &FeatureMap<usize>,
        varpi: &[f64],
        mu_feature_mean: Vec<f64>,
    ) -> Self {
        assert_eq!(varpi.len(), mdp.n_pairs());
        assert_eq!(mu_feature_mean.len(), features.d());
        let mut steps = Vec::new();
        let mut max_cost = 0.0f64;
        for x in 0..mdp.n_states() {
            for u in 0..mdp.n_actions() {
                let w_z = varpi[mdp.z_index(x, u)];
                max_cost = max_cost.max(mdp.cost(x, u).abs());
                if w_z == 0.0 {
                    continue;
                }
                let zeta = features.zeta(&x, u);
                if zeta.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let psi = features.psi(&x, u);
                for x2 in 0..mdp.n_states() {
                    let p = mdp.transition_prob(x, u, x2);
                    if p == 0.0 {
                        continue;
                    }
                    let next_psi: Vec<Vec<f64>> =
                        (0..mdp.n_actions()).map(|v| features.psi(&x2, v)).collect();
                    steps.push(StepTerm {
                        weight: w_z * p,
                        psi: psi.clone(),
                        cost: mdp.cost(x, u),
                        zeta: zeta.clone(),
                        next_psi,
                    });
                }
            }
        }
        ConstraintSystem {
            gamma: mdp.discount(),
            d: features.d(),
            const_d: features.const_d(),
            n_actions: mdp.n_actions(),
            n_steps: 1,
            steps,
            mu_feature_mean,
            max_cost,
            relative: None,
        }
    }

    pub fn with_relative(mut self, delta: f64, omega_feature_mean: Vec<f64>) -> Self {
        assert!(delta > 0.0);
        assert_eq!(omega_feature_mean.len(), self.d);
        self.relative = Some(RelativeData { delta, omega_feature_mean });
        self
    }

    /// `10³ (1 + max cost) / (1 - γ)`: far outside `‖Q*‖_∞ ≤ max c/(1-γ)`,
    /// so the box never binds at the solution it is meant to protect.
    pub fn default_box_radius(&self) -> f64 {
        1e3 * (1.0 + self.max_cost) / (1.0 - self.gamma)
    }

    /// Effective per-step θ-coefficient: ψ_k plus the relative shift δ·ω̄
    /// when solving the recentred program.
    fn effective_psi(&self, step: &StepTerm, relative: bool) -> Vec<f64> {
        match (&self.relative, relative) {
            (Some(r), true) => step
                .psi
                .iter()
                .zip(&r.omega_feature_mean)
                .map(|(p, o)| p + r.delta * o)
                .collect(),
            _ => step.psi.clone(),
        }
    }
}

/// `Σ_z μ(z) ψ(z)` for the uniform pmf over state-action pairs.
pub fn uniform_mu_feature_mean(features: &FeatureMap<usize>, n_states: usize) -> Vec<f64> {
    let nz = (n_states * features.n_actions()) as f64;
    let mut m = vec![0.0; features.d()];
    for x in 0..n_states {
        for u in 0..features.n_actions() {
            for (mi, pi) in m.iter_mut().zip(features.psi(&x, u)) {
                *mi += pi / nz;
            }
        }
    }
    m
}

fn min_next_value(theta: &[f64], next_psi: &[Vec<f64>]) -> f64 {
    next_psi.iter().map(|p| dot(theta, p)).fold(f64::INFINITY, f64::min)
}

/// Empirical constraint function `ḡ_N(θ)`: componentwise weighted average of
/// `-D_{k+1}(θ) ζ_k`, the greedy (pointwise-max over policies) form.
pub fn gbar_n(cs: &ConstraintSystem, theta: &[f64]) -> Vec<f64> {
    gbar_impl(cs, theta, false, |step| min_next_value(theta, &step.next_psi))
}

/// Policy-fixed form: the next-state value is read at `policy(next block)`
/// instead of the minimizer.  Componentwise `gbar_n_policy ≤ gbar_n`, with
/// equality when the policy is greedy for θ.
pub fn gbar_n_policy(
    cs: &ConstraintSystem,
    theta: &[f64],
    policy: impl Fn(&[Vec<f64>]) -> usize,
) -> Vec<f64> {
    gbar_impl(cs, theta, false, |step| dot(theta, &step.next_psi[policy(&step.next_psi)]))
}

/// Relative variant of [`gbar_n`]; requires relative data on the system.
pub fn gbar_n_relative(cs: &ConstraintSystem, theta: &[f64]) -> Result<Vec<f64>, CvxqError> {
    if cs.relative.is_none() {
        return Err(CvxqError::MissingRelativeData);
    }
    Ok(gbar_impl(cs, theta, true, |step| min_next_value(theta, &step.next_psi)))
}

fn gbar_impl(
    cs: &ConstraintSystem,
    theta: &[f64],
    relative: bool,
    next_value: impl Fn(&StepTerm) -> f64,
) -> Vec<f64> {
    assert_eq!(theta.len(), cs.d);
    let mut g = vec![0.0; cs.const_d];
    for step in &cs.steps {
        let psi_eff = cs.effective_psi(step, relative);
        let neg_d = dot(theta, &psi_eff) - step.cost - cs.gamma * next_value(step);
        let scale = step.weight * neg_d;
        for (gi, zi) in g.iter_mut().zip(&step.zeta) {
            if *zi != 0.0 {
                *gi += scale * zi;
            }
        }
    }
    g
}

/// Exact steady-state constraint function for a finite model under a
/// stationary randomized policy: `ḡ^i(θ) = Σ_z ϖ(z) ζ^i(z) (θ'ψ(z) - c(z)
/// - γ Σ_x' P(x'|z) min_u θ'ψ(x',u))`.
pub fn exact_gbar(
    mdp: &FiniteMdp,
    features: &FeatureMap<usize>,
    varpi: &[f64],
    theta: &[f64],
) -> Vec<f64> {
    assert_eq!(varpi.len(), mdp.n_pairs());
    assert_eq!(theta.len(), features.d());
    let mut g = vec![0.0; features.const_d()];
    for x in 0..mdp.n_states() {
        for u in 0..mdp.n_actions() {
            let w = varpi[mdp.z_index(x, u)];
            if w == 0.0 {
                continue;
            }
            let zeta = features.zeta(&x, u);
            if zeta.iter().all(|v| *v == 0.0) {
                continue;
            }
            let mut expected_min = 0.0;
            for x2 in 0..mdp.n_states() {
                let p = mdp.transition_prob(x, u, x2);
                if p == 0.0 {
                    continue;
                }
                let m = (0..mdp.n_actions())
                    .map(|v| dot(theta, &features.psi(&x2, v)))
                    .fold(f64::INFINITY, f64::min);
                expected_min += p * m;
            }
            let neg_d = dot(theta, &features.psi(&x, u)) - mdp.cost(x, u) - mdp.discount() * expected_min;
            for (gi, zi) in g.iter_mut().zip(&zeta) {
                *gi += w * zi * neg_d;
            }
        }
    }
    g
}

/// Solution of a convex Q-learning program, reduced to the moment-constraint
/// coordinates (epigraph or cut bookkeeping is stripped).
#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub theta: Vec<f64>,
    pub objective_value: f64,
    /// Indices i with `|ḡ_N^i(θ)|` within tolerance of zero.
    pub active_set: Vec<usize>,
    /// Multipliers for the ΞD moment constraints.
    pub duals: Vec<f64>,
    /// Improving direction in θ when Unbounded.
    pub ray: Option<Vec<f64>>,
    /// True when some θ coordinate sits on the box.
    pub at_box: bool,
    pub box_radius: f64,
    /// Cut rounds used (constraint generation only).
    pub cut_rounds: Option<usize>,
}

impl SolveReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

// Distinct next-state feature blocks, keyed by exact bit patterns.  Two steps
// share an epigraph variable iff their next-state blocks are identical, which
// for tabular data collapses the variable count to the number of states.
struct KeyTable {
    blocks: Vec<Vec<Vec<f64>>>,
    /// `W[i][j] = Σ_{k: key(k)=j} w_k ζ_k^i`
    weights: DMatrix<f64>,
}

fn build_key_table(cs: &ConstraintSystem) -> KeyTable {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut blocks = Vec::new();
    let mut key_of_step = Vec::with_capacity(cs.steps.len());
    for step in &cs.steps {
        let bits: Vec<u64> =
            step.next_psi.iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect();
        let next = blocks.len();
        let key = *index.entry(bits).or_insert_with(|| {
            blocks.push(step.next_psi.clone());
            next
        });
        key_of_step.push(key);
    }
    let mut weights = DMatrix::zeros(cs.const_d, blocks.len());
    for (k, step) in cs.steps.iter().enumerate() {
        let j = key_of_step[k];
        for (i, zi) in step.zeta.iter().enumerate() {
            if *zi != 0.0 {
                weights[(i, j)] += step.weight * zi;
            }
        }
    }
    KeyTable { blocks, weights }
}

// Moment-row left-hand sides over θ: G0[i] = Σ_k w_k ζ_k^i ψ_k(effective),
// and right-hand sides C0[i] = Σ_k w_k ζ_k^i c_k.  Assembly is chunked over
// steps and folded in order, so the result is identical with and without the
// parallel feature.
fn assemble_moment_rows(cs: &ConstraintSystem, relative: bool) -> (DMatrix<f64>, Vec<f64>) {
    let parts = parallel::chunk_map(&cs.steps, ASSEMBLY_CHUNK, |chunk| {
        let mut g0 = DMatrix::zeros(cs.const_d, cs.d);
        let mut c0 = vec![0.0; cs.const_d];
        for step in chunk {
            let psi_eff = cs.effective_psi(step, relative);
            for (i, zi) in step.zeta.iter().enumerate() {
                if *zi == 0.0 {
                    continue;
                }
                let w = step.weight * zi;
                for (jj, p) in psi_eff.iter().enumerate() {
                    g0[(i, jj)] += w * p;
                }
                c0[i] += w * step.cost;
            }
        }
        (g0, c0)
    });
    let mut g0 = DMatrix::zeros(cs.const_d, cs.d);
    let mut c0 = vec![0.0; cs.const_d];
    for (pg, pc) in parts {
        g0 += pg;
        for (a, b) in c0.iter_mut().zip(pc) {
            *a += b;
        }
    }
    (g0, c0)
}

fn solve_epigraph(cs: &ConstraintSystem, r: f64, relative: bool) -> Result<SolveReport, CvxqError> {
    if relative && cs.relative.is_none() {
        return Err(CvxqError::MissingRelativeData);
    }
    let keys = build_key_table(cs);
    let (g0, c0) = assemble_moment_rows(cs, relative);
    let n_keys = keys.blocks.len();
    let d = cs.d;
    let n_vars = d + n_keys;
    let n_rows = cs.const_d + n_keys * cs.n_actions;

    let mut a = DMatrix::zeros(n_rows, n_vars);
    let mut b = vec![0.0; n_rows];
    // moment rows: θ'G0_i + γ Σ_j W_ij s_j ≤ C0_i
    for i in 0..cs.const_d {
        for jj in 0..d {
            a[(i, jj)] = g0[(i, jj)];
        }
        for j in 0..n_keys {
            let w = keys.weights[(i, j)];
            if w != 0.0 {
                a[(i, d + j)] = cs.gamma * w;
            }
        }
        b[i] = c0[i];
    }
    // epigraph rows: s_j ≥ -θ'ψ(block_j, u) for every action
    let mut row = cs.const_d;
    for (j, block) in keys.blocks.iter().enumerate() {
        for psi_u in block {
            for (jj, p) in psi_u.iter().enumerate() {
                a[(row, jj)] = -p;
            }
            a[(row, d + j)] = -1.0;
            row += 1;
        }
    }

    let mut objective = vec![0.0; n_vars];
    objective[..d].copy_from_slice(&cs.mu_feature_mean);
    let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); n_vars];
    if r.is_finite() {
        assert!(r > 0.0);
        for bd in bounds.iter_mut().take(d) {
            *bd = (-r, r);
        }
    }
    let lp = LinearProgram { objective, a, b, bounds };
    let rep = lp::solve_lp(&lp)?;
    Ok(reduce_report(cs, rep, r, relative, None))
}

fn reduce_report(
    cs: &ConstraintSystem,
    rep: lp::SolveReport,
    r: f64,
    relative: bool,
    cut_rounds: Option<usize>,
) -> SolveReport {
    let d = cs.d;
    match rep.status {
        SolveStatus::Optimal => {
            let theta = rep.theta[..d].to_vec();
            let g = if relative {
                gbar_impl(cs, &theta, true, |s| min_next_value(&theta, &s.next_psi))
            } else {
                gbar_n(cs, &theta)
            };
            let active_set: Vec<usize> =
                (0..cs.const_d).filter(|&i| g[i].abs() <= GALERKIN_TOL).collect();
            let duals = rep.duals[..cs.const_d.min(rep.duals.len())].to_vec();
            let at_box = r.is_finite()
                && theta.iter().any(|t| (t.abs() - r).abs() <= 1e-9 * (1.0 + r));
            SolveReport {
                status: SolveStatus::Optimal,
                objective_value: dot(&cs.mu_feature_mean, &theta),
                theta,
                active_set,
                duals,
                ray: None,
                at_box,
                box_radius: r,
                cut_rounds,
            }
        }
        status => SolveReport {
            status,
            theta: Vec::new(),
            objective_value: if status == SolveStatus::Unbounded {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            },
            active_set: Vec::new(),
            duals: vec![0.0; cs.const_d],
            ray: rep.ray.map(|ray| ray[..d].to_vec()),
            at_box: false,
            box_radius: r,
            cut_rounds,
        },
    }
}

/// Solves `max θ'μ̄ s.t. ḡ_N(θ) ≤ 0, ‖θ‖_∞ ≤ r` through the epigraph lift:
/// one auxiliary variable per distinct next-state block, entering each
/// moment row with nonnegative coefficient, so the lift is exact.
/// Pass `r = f64::INFINITY` to drop the box.
pub fn solve_cvxq(cs: &ConstraintSystem, r: f64) -> Result<SolveReport, CvxqError> {
    solve_epigraph(cs, r, false)
}

/// Same program with the relative temporal difference (requires relative
/// data): every ψ_k is shifted by δ·ω̄, nothing else changes.
pub fn solve_relative_cvxq(cs: &ConstraintSystem, r: f64) -> Result<SolveReport, CvxqError> {
    solve_epigraph(cs, r, true)
}

/// Policy-fixed program: the next-state value in every step is read at
/// `policy(next_psi)` instead of the minimizing action, which makes every
/// moment row linear in θ.  The optimizer approximates the fixed policy's
/// Q-function from below, so its greedy readout is a policy-improvement
/// step; unlike the greedy-form program, the maximizer here has no
/// incentive to equalize action blocks (lowering one block never loosens
/// another row's cap), so the improvement signal survives.
pub fn solve_cvxq_policy(
    cs: &ConstraintSystem,
    r: f64,
    policy: impl Fn(&[Vec<f64>]) -> usize + Sync,
) -> Result<SolveReport, CvxqError> {
    solve_policy_impl(cs, r, false, &policy)
}

/// Relative-TD version of [`solve_cvxq_policy`].
pub fn solve_relative_cvxq_policy(
    cs: &ConstraintSystem,
    r: f64,
    policy: impl Fn(&[Vec<f64>]) -> usize + Sync,
) -> Result<SolveReport, CvxqError> {
    solve_policy_impl(cs, r, true, &policy)
}

fn solve_policy_impl(
    cs: &ConstraintSystem,
    r: f64,
    relative: bool,
    policy: &(impl Fn(&[Vec<f64>]) -> usize + Sync),
) -> Result<SolveReport, CvxqError> {
    if relative && cs.relative.is_none() {
        return Err(CvxqError::MissingRelativeData);
    }
    let parts = parallel::chunk_map(&cs.steps, ASSEMBLY_CHUNK, |chunk| {
        let mut g = DMatrix::zeros(cs.const_d, cs.d);
        let mut c0 = vec![0.0; cs.const_d];
        for step in chunk {
            let psi_eff = cs.effective_psi(step, relative);
            let next = &step.next_psi[policy(&step.next_psi)];
            for (i, zi) in step.zeta.iter().enumerate() {
                if *zi == 0.0 {
                    continue;
                }
                let w = step.weight * zi;
                for jj in 0..cs.d {
                    g[(i, jj)] += w * (psi_eff[jj] - cs.gamma * next[jj]);
                }
                c0[i] += w * step.cost;
            }
        }
        (g, c0)
    });
    let mut g = DMatrix::zeros(cs.const_d, cs.d);
    let mut c0 = vec![0.0; cs.const_d];
    for (pg, pc) in parts {
        g += pg;
        for (a, b) in c0.iter_mut().zip(pc) {
            *a += b;
        }
    }

    let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); cs.d];
    if r.is_finite() {
        assert!(r > 0.0);
        bounds = vec![(-r, r); cs.d];
    }
    let lp = LinearProgram { objective: cs.mu_feature_mean.clone(), a: g, b: c0, bounds };
    let rep = lp::solve_lp(&lp)?;

    match rep.status {
        SolveStatus::Optimal => {
            let theta = rep.theta;
            let gvals =
                gbar_impl(cs, &theta, relative, |s| dot(&theta, &s.next_psi[policy(&s.next_psi)]));
            let active_set: Vec<usize> =
                (0..cs.const_d).filter(|&i| gvals[i].abs() <= GALERKIN_TOL).collect();
            let at_box = r.is_finite()
                && theta.iter().any(|t| (t.abs() - r).abs() <= 1e-9 * (1.0 + r));
            Ok(SolveReport {
                status: SolveStatus::Optimal,
                objective_value: dot(&cs.mu_feature_mean, &theta),
                theta,
                active_set,
                duals: rep.duals,
                ray: None,
                at_box,
                box_radius: r,
                cut_rounds: None,
            })
        }
        status => Ok(SolveReport {
            status,
            theta: Vec::new(),
            objective_value: if status == SolveStatus::Unbounded {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            },
            active_set: Vec::new(),
            duals: vec![0.0; cs.const_d],
            ray: rep.ray,
            at_box: false,
            box_radius: r,
            cut_rounds: None,
        }),
    }
}

/// Cutting-plane solver: maintains a set of per-key action assignments,
/// solves the induced LP (each assignment contributes ΞD linear rows), then
/// adds the greedy assignment at the current optimizer until `ḡ_N(θ̂)` is
/// satisfied within tolerance.  Equivalent to [`solve_cvxq`] but never forms
/// epigraph variables, which keeps the LP narrow on long trajectories.
pub fn solve_cvxq_constraint_gen(cs: &ConstraintSystem, r: f64) -> Result<SolveReport, CvxqError> {
    solve_constraint_gen_impl(cs, r, false, DEFAULT_CUT_LIMIT)
}

/// Relative-TD version of [`solve_cvxq_constraint_gen`].
pub fn solve_relative_cvxq_constraint_gen(
    cs: &ConstraintSystem,
    r: f64,
) -> Result<SolveReport, CvxqError> {
    solve_constraint_gen_impl(cs, r, true, DEFAULT_CUT_LIMIT)
}

fn solve_constraint_gen_impl(
    cs: &ConstraintSystem,
    r: f64,
    relative: bool,
    cut_limit: usize,
) -> Result<SolveReport, CvxqError> {
    if relative && cs.relative.is_none() {
        return Err(CvxqError::MissingRelativeData);
    }
    let keys = build_key_table(cs);
    let (g0, c0) = assemble_moment_rows(cs, relative);
    let d = cs.d;

    // greedy action per key at θ
    let greedy = |theta: &[f64]| -> Vec<usize> {
        keys.blocks
            .iter()
            .map(|block| {
                let mut best = 0;
                let mut best_v = dot(theta, &block[0]);
                for (u, psi_u) in block.iter().enumerate().skip(1) {
                    let v = dot(theta, psi_u);
                    if v < best_v {
                        best_v = v;
                        best = u;
                    }
                }
                best
            })
            .collect()
    };

    // rows for one action assignment: θ'(G0_i - γ Σ_j W_ij ψ_j(a_j)) ≤ C0_i;
    // ḡ_N ≤ 0 iff these hold for every assignment, since the per-key maxima
    // are independent
    let block_rows = |assign: &[usize]| -> DMatrix<f64> {
        let mut rows = DMatrix::zeros(cs.const_d, d);
        for i in 0..cs.const_d {
            for jj in 0..d {
                rows[(i, jj)] = g0[(i, jj)];
            }
            for (j, &aj) in assign.iter().enumerate() {
                let w = keys.weights[(i, j)];
                if w != 0.0 {
                    let psi = &keys.blocks[j][aj];
                    for (jj, p) in psi.iter().enumerate() {
                        rows[(i, jj)] -= cs.gamma * w * p;
                    }
                }
            }
        }
        rows
    };

    let bounds = if r.is_finite() {
        assert!(r > 0.0);
        vec![(-r, r); d]
    } else {
        vec![(f64::NEG_INFINITY, f64::INFINITY); d]
    };

    let mut assignments: Vec<Vec<usize>> = vec![greedy(&vec![0.0; d])];
    let mut a = block_rows(&assignments[0]);
    let mut b = c0.clone();
    let mut rounds = 0;

    loop {
        rounds += 1;
        if rounds > cut_limit {
            return Err(CvxqError::IterationLimit { cuts: cut_limit });
        }
        let lp = LinearProgram {
            objective: cs.mu_feature_mean.clone(),
            a: a.clone(),
            b: b.clone(),
            bounds: bounds.clone(),
        };
        let rep = lp::solve_lp(&lp)?;
        if rep.status != SolveStatus::Optimal {
            return Ok(reduce_cutgen_report(cs, rep, r, rounds));
        }
        let theta = rep.theta.clone();
        let g = if relative {
            gbar_impl(cs, &theta, true, |s| min_next_value(&theta, &s.next_psi))
        } else {
            gbar_n(cs, &theta)
        };
        let worst = g.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(*v));
        if worst <= CUT_VIOLATION_TOL {
            // sum block duals per moment index: the multiplier of a max-type
            // constraint splits across the affine pieces active at θ̂
            let mut duals = vec![0.0; cs.const_d];
            for (p, lam) in rep.duals.iter().enumerate() {
                duals[p % cs.const_d] += lam.max(0.0);
            }
            let active_set: Vec<usize> =
                (0..cs.const_d).filter(|&i| g[i].abs() <= GALERKIN_TOL).collect();
            let at_box = r.is_finite()
                && theta.iter().any(|t| (t.abs() - r).abs() <= 1e-9 * (1.0 + r));
            return Ok(SolveReport {
                status: SolveStatus::Optimal,
                objective_value: dot(&cs.mu_feature_mean, &theta),
                theta,
                active_set,
                duals,
                ray: None,
                at_box,
                box_radius: r,
                cut_rounds: Some(rounds),
            });
        }
        let assign = greedy(&theta);
        if assignments.contains(&assign) {
            // the violated block is already present: numerical stall
            return Err(CvxqError::IterationLimit { cuts: rounds });
        }
        let new_rows = block_rows(&assign);
        assignments.push(assign);
        let old_m = a.nrows();
        let mut a2 = DMatrix::zeros(old_m + cs.const_d, d);
        a2.view_mut((0, 0), (old_m, d)).copy_from(&a);
        a2.view_mut((old_m, 0), (cs.const_d, d)).copy_from(&new_rows);
        a = a2;
        b.extend_from_slice(&c0);
    }
}

fn reduce_cutgen_report(cs: &ConstraintSystem, rep: lp::SolveReport, r: f64, rounds: usize) -> SolveReport {
    SolveReport {
        status: rep.status,
        theta: Vec::new(),
        objective_value: if rep.status == SolveStatus::Unbounded {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        },
        active_set: Vec::new(),
        duals: vec![0.0; cs.const_d],
        ray: rep.ray.map(|ray| ray[..cs.d].to_vec()),
        at_box: false,
        box_radius: r,
        cut_rounds: Some(rounds),
    }
}

/// Structure of the optimizer: which empirical constraints hold with
/// equality.  At a basic optimal solution strictly inside the box at least
/// `d` of them must be tight; fewer is flagged as degenerate (reported, not
/// fatal).
#[derive(Debug, Clone, Serialize)]
pub struct GalerkinReport {
    pub tight_indices: Vec<usize>,
    pub residuals: Vec<f64>,
    pub degenerate: bool,
    pub at_box: bool,
}

pub fn galerkin_report(cs: &ConstraintSystem, report: &SolveReport) -> GalerkinReport {
    assert_eq!(report.status, SolveStatus::Optimal, "galerkin analysis needs an optimizer");
    let g = gbar_n(cs, &report.theta);
    let tight_indices: Vec<usize> =
        (0..cs.const_d).filter(|&i| g[i].abs() <= GALERKIN_TOL).collect();
    let degenerate = tight_indices.len() < cs.d;
    GalerkinReport { degenerate, at_box: report.at_box, tight_indices, residuals: g }
}

/// Report of the feature-excitation test.
#[derive(Debug, Clone, Serialize)]
pub struct ExcitationReport {
    /// True when `{v : v'ψ_k ≥ 0 for all k} = {0}`, which forces the
    /// constraint region to be bounded without any box.
    pub bounded: bool,
    pub witness: Option<Vec<f64>>,
}

/// Decides whether the sampled features leave any half space unexplored: for
/// each coordinate and sign, maximize `±v_j` over the cone `v'ψ_k ≥ 0` cut
/// to the unit box.  All 2d optima zero means the cone is trivial.
pub fn excitation_check(cs: &ConstraintSystem) -> Result<ExcitationReport, CvxqError> {
    let d = cs.d;
    // unique sampled ψ vectors; duplicates carry no extra information
    let mut seen: HashMap<Vec<u64>, ()> = HashMap::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut m = 0;
    for step in &cs.steps {
        let bits: Vec<u64> = step.psi.iter().map(|v| v.to_bits()).collect();
        if seen.insert(bits, ()).is_none() {
            for p in &step.psi {
                rows.push(-p);
            }
            m += 1;
        }
    }
    let a = DMatrix::from_row_slice(m, d, &rows);
    let b = vec![0.0; m];
    for j in 0..d {
        for sigma in [1.0, -1.0] {
            let mut obj = vec![0.0; d];
            obj[j] = sigma;
            let lp = LinearProgram::with_box_radius(obj, a.clone(), b.clone(), 1.0);
            let rep = lp::solve_lp(&lp)?;
            debug_assert_eq!(rep.status, SolveStatus::Optimal);
            if rep.objective_value > 1e-7 {
                return Ok(ExcitationReport { bounded: false, witness: Some(rep.theta) });
            }
        }
    }
    Ok(ExcitationReport { bounded: true, witness: None })
}

//! Independent reference computations used to validate the main solvers.
//!
//! Everything here is deliberately brute force: exhaustive policy
//! enumeration, vertex enumeration over constraint subsets, central
//! differences.  These routines are slow and simple so that the fast paths
//! elsewhere can be tested against them.

use nalgebra::{DMatrix, DVector};

use crate::lp::LinearProgram;
use crate::mdp::{DeterministicPolicy, FiniteMdp, MdpError};
use crate::simulate::Trajectory;

/// All `|U|^|X|` deterministic policies.  Panics above a million policies;
/// callers are expected to keep oracle models tiny.
pub fn enumerate_policies(mdp: &FiniteMdp) -> Vec<DeterministicPolicy> {
    let nx = mdp.n_states();
    let nu = mdp.n_actions();
    let total = (nu as u128).pow(nx as u32);
    assert!(total <= 1_000_000, "policy space too large to enumerate");
    let mut out = Vec::with_capacity(total as usize);
    let mut actions = vec![0usize; nx];
    loop {
        out.push(DeterministicPolicy { actions: actions.clone() });
        // odometer increment over base-|U| digits
        let mut pos = 0;
        loop {
            if pos == nx {
                return out;
            }
            actions[pos] += 1;
            if actions[pos] < nu {
                break;
            }
            actions[pos] = 0;
            pos += 1;
        }
    }
}

/// Optimal Q-function by exhaustive policy evaluation: the pointwise minimum
/// over all deterministic policies of the one-step lookahead value
/// `c(x,u) + γ Σ_x' P_u(x,x') V_φ(x')`.
pub fn q_star_policy_enumeration(mdp: &FiniteMdp) -> DMatrix<f64> {
    let nx = mdp.n_states();
    let nu = mdp.n_actions();
    let mut q = DMatrix::from_element(nx, nu, f64::INFINITY);
    for phi in enumerate_policies(mdp) {
        let v = crate::mdp::policy_value(mdp, &phi);
        for x in 0..nx {
            for u in 0..nu {
                let mut lookahead = mdp.cost(x, u);
                for x2 in 0..nx {
                    lookahead += mdp.discount() * mdp.transition_prob(x, u, x2) * v[x2];
                }
                if lookahead < q[(x, u)] {
                    q[(x, u)] = lookahead;
                }
            }
        }
    }
    q
}

/// Maximum-likelihood model from a trajectory: transition rows from counts,
/// costs from observed samples.  Errors if any state-action pair was never
/// visited, since its row would be undefined.
pub fn empirical_mdp(
    traj: &Trajectory<usize>,
    n_states: usize,
    n_actions: usize,
    discount: f64,
) -> Result<FiniteMdp, MdpError> {
    let mut counts = vec![DMatrix::<f64>::zeros(n_states, n_states); n_actions];
    let mut cost_sum = DMatrix::<f64>::zeros(n_states, n_actions);
    let mut visits = DMatrix::<f64>::zeros(n_states, n_actions);
    for s in &traj.steps {
        counts[s.action][(s.state, s.next_state)] += 1.0;
        cost_sum[(s.state, s.action)] += s.cost;
        visits[(s.state, s.action)] += 1.0;
    }
    let mut transitions = Vec::with_capacity(n_actions);
    for (u, mat) in counts.into_iter().enumerate() {
        let mut p = DMatrix::zeros(n_states, n_states);
        for x in 0..n_states {
            let total: f64 = mat.row(x).sum();
            if total == 0.0 {
                return Err(MdpError::InvalidModel(format!(
                    "state {x} action {u} never visited; empirical model undefined"
                )));
            }
            for x2 in 0..n_states {
                p[(x, x2)] = mat[(x, x2)] / total;
            }
        }
        transitions.push(p);
    }
    let mut cost = DMatrix::zeros(n_states, n_actions);
    for x in 0..n_states {
        for u in 0..n_actions {
            cost[(x, u)] = cost_sum[(x, u)] / visits[(x, u)];
        }
    }
    FiniteMdp::new(transitions, cost, discount)
}

/// Brute-force LP solve by enumerating all vertices: every subset of n rows
/// of the box-extended system that intersects in a single point is checked
/// for feasibility, and the best feasible vertex is returned with its
/// objective value.  `None` when no feasible vertex exists.
pub fn best_vertex(lp: &LinearProgram) -> Option<(Vec<f64>, f64)> {
    let n = lp.n_vars();
    let m = lp.n_rows();
    // box-extended rows, same convention as the solver
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for i in 0..m {
        rows.push(((0..n).map(|j| lp.a[(i, j)]).collect(), lp.b[i]));
    }
    for (j, (lo, hi)) in lp.bounds.iter().enumerate() {
        if hi.is_finite() {
            let mut r = vec![0.0; n];
            r[j] = 1.0;
            rows.push((r, *hi));
        }
        if lo.is_finite() {
            let mut r = vec![0.0; n];
            r[j] = -1.0;
            rows.push((r, -*lo));
        }
    }
    let mt = rows.len();
    if mt < n {
        return None;
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut subset = vec![0usize; n];
    enumerate_subsets(mt, n, &mut subset, 0, 0, &mut |sel: &[usize]| {
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for (r, &i) in sel.iter().enumerate() {
            for j in 0..n {
                a[(r, j)] = rows[i].0[j];
            }
            b[r] = rows[i].1;
        }
        let Some(x) = a.lu().solve(&b) else { return };
        if !x.iter().all(|v| v.is_finite()) {
            return;
        }
        for (row, rhs) in &rows {
            let ax: f64 = row.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            if ax > rhs + 1e-9 * (1.0 + rhs.abs()) {
                return;
            }
        }
        let val: f64 = lp.objective.iter().zip(x.iter()).map(|(c, v)| c * v).sum();
        if best.as_ref().is_none_or(|(_, bv)| val > *bv) {
            best = Some((x.iter().copied().collect(), val));
        }
    });
    best
}

fn enumerate_subsets(
    m: usize,
    k: usize,
    scratch: &mut Vec<usize>,
    depth: usize,
    start: usize,
    visit: &mut impl FnMut(&[usize]),
) {
    if depth == k {
        visit(scratch);
        return;
    }
    for i in start..m {
        scratch[depth] = i;
        enumerate_subsets(m, k, scratch, depth + 1, i + 1, visit);
    }
}

/// Central-difference gradient of `f` at `theta`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(theta.len());
    let mut t = theta.to_vec();
    for j in 0..theta.len() {
        let step = h * (1.0 + theta[j].abs());
        t[j] = theta[j] + step;
        let up = f(&t);
        t[j] = theta[j] - step;
        let down = f(&t);
        t[j] = theta[j];
        g.push((up - down) / (2.0 * step));
    }
    g
}

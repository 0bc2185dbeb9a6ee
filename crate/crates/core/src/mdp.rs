//! Finite Markov decision process models and exact dynamic-programming
//! oracles: value iteration, greedy policies, policy evaluation, and the
//! invariant distribution of the joint state-action chain under a randomized
//! behavior policy.
//!
//! States are `0..n_states`, actions `0..n_actions`, and the joint pair
//! `z = (x, u)` is flattened as `x * n_actions + u` throughout the crate.

use nalgebra::{DMatrix, DVector};
use std::fmt;

/// Row-sum and fixed-point tolerance for model validation.
const STOCHASTIC_TOL: f64 = 1e-12;
/// Tolerance on the eigenvalue-1 multiplicity test for uni-chain validation.
const UNICHAIN_EIG_TOL: f64 = 1e-8;
/// Residual allowed on the returned invariant pmf.
const PMF_FIXED_POINT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum MdpError {
    /// Model fields violate a structural invariant (shape, stochasticity,
    /// sign, or discount range).
    InvalidModel(String),
    /// The joint chain has more than one recurrent class, so the invariant
    /// pmf is not unique.
    Multichain,
    /// Text-format parse failure with 1-based line number.
    Parse { line: usize, message: String },
}

impl fmt::Display for MdpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MdpError::InvalidModel(msg) => write!(f, "invalid MDP: {msg}"),
            MdpError::Multichain => write!(f, "joint chain is not uni-chain: invariant pmf is not unique"),
            MdpError::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
        }
    }
}

impl std::error::Error for MdpError {}

/// Finite MDP with one row-stochastic transition matrix per action and a
/// nonnegative cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    /// `transitions[u][(x, x')]` is the probability of moving to `x'` from
    /// `x` under action `u`.
    transitions: Vec<DMatrix<f64>>,
    /// `cost[(x, u)] >= 0`.
    cost: DMatrix<f64>,
    discount: f64,
}

impl FiniteMdp {
    pub fn new(
        transitions: Vec<DMatrix<f64>>,
        cost: DMatrix<f64>,
        discount: f64,
    ) -> Result<Self, MdpError> {
        let n_actions = transitions.len();
        if n_actions == 0 {
            return Err(MdpError::InvalidModel("at least one action required".into()));
        }
        let n_states = transitions[0].nrows();
        if n_states == 0 {
            return Err(MdpError::InvalidModel("at least one state required".into()));
        }
        if !(0.0 < discount && discount < 1.0) {
            return Err(MdpError::InvalidModel(format!("discount {discount} outside (0, 1)")));
        }
        for (u, p) in transitions.iter().enumerate() {
            if p.nrows() != n_states || p.ncols() != n_states {
                return Err(MdpError::InvalidModel(format!(
                    "transition matrix for action {u} has shape {}x{}, expected {n_states}x{n_states}",
                    p.nrows(),
                    p.ncols()
                )));
            }
            for x in 0..n_states {
                let mut row_sum = 0.0;
                for x2 in 0..n_states {
                    let v = p[(x, x2)];
                    if !(v >= 0.0) {
                        return Err(MdpError::InvalidModel(format!(
                            "P_{u}({x},{x2}) = {v} is negative or NaN"
                        )));
                    }
                    row_sum += v;
                }
                if (row_sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(MdpError::InvalidModel(format!(
                        "row {x} of P_{u} sums to {row_sum}, expected 1"
                    )));
                }
            }
        }
        if cost.nrows() != n_states || cost.ncols() != n_actions {
            return Err(MdpError::InvalidModel(format!(
                "cost table has shape {}x{}, expected {n_states}x{n_actions}",
                cost.nrows(),
                cost.ncols()
            )));
        }
        if cost.iter().any(|c| !(*c >= 0.0)) {
            return Err(MdpError::InvalidModel("cost table has a negative or NaN entry".into()));
        }
        Ok(FiniteMdp { n_states, n_actions, transitions, cost, discount })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Number of state-action pairs `|Z|`.
    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn cost(&self, x: usize, u: usize) -> f64 {
        self.cost[(x, u)]
    }

    pub fn transition(&self, u: usize) -> &DMatrix<f64> {
        &self.transitions[u]
    }

    pub fn transition_prob(&self, x: usize, u: usize, x_next: usize) -> f64 {
        self.transitions[u][(x, x_next)]
    }

    /// Flattened index of the pair `(x, u)`.
    pub fn z_index(&self, x: usize, u: usize) -> usize {
        x * self.n_actions + u
    }

    /// Inverse of [`FiniteMdp::z_index`].
    pub fn z_pair(&self, z: usize) -> (usize, usize) {
        (z / self.n_actions, z % self.n_actions)
    }

    /// Serializes to the plain-text model format.  Values are written with
    /// Rust's shortest round-trip float formatting, so `from_text` recovers
    /// them exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("states {}\n", self.n_states));
        out.push_str(&format!("actions {}\n", self.n_actions));
        out.push_str(&format!("discount {}\n", self.discount));
        out.push_str("cost\n");
        for x in 0..self.n_states {
            let row: Vec<String> = (0..self.n_actions).map(|u| format!("{}", self.cost[(x, u)])).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        for (u, p) in self.transitions.iter().enumerate() {
            out.push_str(&format!("transition {u}\n"));
            for x in 0..self.n_states {
                let row: Vec<String> = (0..self.n_states).map(|x2| format!("{}", p[(x, x2)])).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }

    /// Parses the text format produced by [`FiniteMdp::to_text`].  Blank
    /// lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self, MdpError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let mut next = |expect: &str| -> Result<(usize, String), MdpError> {
            lines
                .next()
                .map(|(n, l)| (n, l.to_string()))
                .ok_or_else(|| MdpError::Parse { line: 0, message: format!("unexpected end of input, expected {expect}") })
        };

        fn keyword_value(line: usize, text: &str, key: &str) -> Result<String, MdpError> {
            let mut parts = text.split_whitespace();
            if parts.next() != Some(key) {
                return Err(MdpError::Parse { line, message: format!("expected `{key} <value>`, got `{text}`") });
            }
            let val = parts
                .next()
                .ok_or_else(|| MdpError::Parse { line, message: format!("`{key}` missing value") })?;
            if parts.next().is_some() {
                return Err(MdpError::Parse { line, message: format!("trailing tokens after `{key}`") });
            }
            Ok(val.to_string())
        }

        fn parse_row(line: usize, text: &str, expect: usize) -> Result<Vec<f64>, MdpError> {
            let vals: Result<Vec<f64>, _> = text.split_whitespace().map(|t| t.parse::<f64>()).collect();
            let vals = vals.map_err(|e| MdpError::Parse { line, message: format!("bad number: {e}") })?;
            if vals.len() != expect {
                return Err(MdpError::Parse { line, message: format!("expected {expect} values, got {}", vals.len()) });
            }
            Ok(vals)
        }

        let (l, s) = next("states")?;
        let n_states: usize = keyword_value(l, &s, "states")?
            .parse()
            .map_err(|e| MdpError::Parse { line: l, message: format!("bad state count: {e}") })?;
        let (l, s) = next("actions")?;
        let n_actions: usize = keyword_value(l, &s, "actions")?
            .parse()
            .map_err(|e| MdpError::Parse { line: l, message: format!("bad action count: {e}") })?;
        let (l, s) = next("discount")?;
        let discount: f64 = keyword_value(l, &s, "discount")?
            .parse()
            .map_err(|e| MdpError::Parse { line: l, message: format!("bad discount: {e}") })?;

        let (l, s) = next("cost")?;
        if s != "cost" {
            return Err(MdpError::Parse { line: l, message: format!("expected `cost`, got `{s}`") });
        }
        let mut cost = DMatrix::zeros(n_states, n_actions);
        for x in 0..n_states {
            let (l, s) = next("cost row")?;
            for (u, v) in parse_row(l, &s, n_actions)?.into_iter().enumerate() {
                cost[(x, u)] = v;
            }
        }

        let mut transitions = Vec::with_capacity(n_actions);
        for u in 0..n_actions {
            let (l, s) = next("transition header")?;
            let got = keyword_value(l, &s, "transition")?;
            if got != u.to_string() {
                return Err(MdpError::Parse { line: l, message: format!("expected `transition {u}`, got `transition {got}`") });
            }
            let mut p = DMatrix::zeros(n_states, n_states);
            for x in 0..n_states {
                let (l, s) = next("transition row")?;
                for (x2, v) in parse_row(l, &s, n_states)?.into_iter().enumerate() {
                    p[(x, x2)] = v;
                }
            }
            transitions.push(p);
        }
        if let Some((l, s)) = lines.next() {
            return Err(MdpError::Parse { line: l, message: format!("trailing content: `{s}`") });
        }
        FiniteMdp::new(transitions, cost, discount)
    }
}

/// Stationary randomized policy: `probs[(x, u)]` is the probability of
/// playing `u` in state `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomizedPolicy {
    probs: DMatrix<f64>,
}

impl RandomizedPolicy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self, MdpError> {
        for x in 0..probs.nrows() {
            let mut sum = 0.0;
            for u in 0..probs.ncols() {
                let v = probs[(x, u)];
                if !(0.0..=1.0).contains(&v) {
                    return Err(MdpError::InvalidModel(format!("policy prob ({x},{u}) = {v} outside [0,1]")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(MdpError::InvalidModel(format!("policy row {x} sums to {sum}")));
            }
        }
        Ok(RandomizedPolicy { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        RandomizedPolicy { probs: DMatrix::from_element(n_states, n_actions, 1.0 / n_actions as f64) }
    }

    /// Mixture `eps * uniform + (1 - eps) * base`.
    pub fn epsilon_uniform(base: &DeterministicPolicy, epsilon: f64, n_actions: usize) -> Self {
        assert!((0.0..=1.0).contains(&epsilon));
        let n_states = base.actions.len();
        let mut probs = DMatrix::from_element(n_states, n_actions, epsilon / n_actions as f64);
        for x in 0..n_states {
            probs[(x, base.actions[x])] += 1.0 - epsilon;
        }
        RandomizedPolicy { probs }
    }

    pub fn prob(&self, x: usize, u: usize) -> f64 {
        self.probs[(x, u)]
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }
}

/// Deterministic stationary policy: one action per state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicPolicy {
    pub actions: Vec<usize>,
}

impl DeterministicPolicy {
    pub fn new(actions: Vec<usize>, n_actions: usize) -> Result<Self, MdpError> {
        if let Some(bad) = actions.iter().find(|u| **u >= n_actions) {
            return Err(MdpError::InvalidModel(format!("action index {bad} out of range")));
        }
        Ok(DeterministicPolicy { actions })
    }

    pub fn action(&self, x: usize) -> usize {
        self.actions[x]
    }
}

/// Bellman fixed-point iteration.  Returns a Q-table whose sup-norm Bellman
/// residual is at most `tol`; convergence is guaranteed by the discount
/// contraction.
pub fn value_iteration(mdp: &FiniteMdp, tol: f64) -> DMatrix<f64> {
    assert!(tol > 0.0);
    let mut q = DMatrix::zeros(mdp.n_states, mdp.n_actions);
    loop {
        let next = bellman_operator(mdp, &q);
        let delta = (&next - &q).amax();
        q = next;
        // The residual of the returned table is at most discount * delta.
        if delta <= tol {
            return q;
        }
    }
}

/// One application of the Bellman operator `(TQ)(x,u) = c(x,u) + γ Σ_x' P_u(x,x') min_u' Q(x',u')`.
pub fn bellman_operator(mdp: &FiniteMdp, q: &DMatrix<f64>) -> DMatrix<f64> {
    let underline: DVector<f64> = DVector::from_iterator(
        mdp.n_states,
        (0..mdp.n_states).map(|x| (0..mdp.n_actions).map(|u| q[(x, u)]).fold(f64::INFINITY, f64::min)),
    );
    let mut out = DMatrix::zeros(mdp.n_states, mdp.n_actions);
    for u in 0..mdp.n_actions {
        let pv = &mdp.transitions[u] * &underline;
        for x in 0..mdp.n_states {
            out[(x, u)] = mdp.cost[(x, u)] + mdp.discount * pv[x];
        }
    }
    out
}

/// Sup-norm Bellman residual of a Q-table.
pub fn bellman_residual(mdp: &FiniteMdp, q: &DMatrix<f64>) -> f64 {
    (bellman_operator(mdp, q) - q).amax()
}

/// Greedy policy of a Q-table; ties broken by the smallest action index so
/// results are reproducible.
pub fn greedy_policy(q: &DMatrix<f64>) -> DeterministicPolicy {
    let actions = (0..q.nrows())
        .map(|x| {
            let mut best = 0usize;
            for u in 1..q.ncols() {
                if q[(x, u)] < q[(x, best)] {
                    best = u;
                }
            }
            best
        })
        .collect();
    DeterministicPolicy { actions }
}

/// Exact discounted cost of a deterministic policy: `V = (I - γ P_φ)^{-1} c_φ`.
pub fn policy_value(mdp: &FiniteMdp, policy: &DeterministicPolicy) -> DVector<f64> {
    let n = mdp.n_states;
    let mut a = DMatrix::identity(n, n);
    let mut c = DVector::zeros(n);
    for x in 0..n {
        let u = policy.action(x);
        c[x] = mdp.cost[(x, u)];
        for x2 in 0..n {
            a[(x, x2)] -= mdp.discount * mdp.transitions[u][(x, x2)];
        }
    }
    a.lu().solve(&c).expect("I - γP is nonsingular for γ < 1")
}

/// Q-table of a deterministic policy: `Q_φ(x,u) = c(x,u) + γ Σ P_u(x,·) V_φ`.
pub fn policy_q(mdp: &FiniteMdp, policy: &DeterministicPolicy) -> DMatrix<f64> {
    let v = policy_value(mdp, policy);
    let mut q = DMatrix::zeros(mdp.n_states, mdp.n_actions);
    for u in 0..mdp.n_actions {
        let pv = &mdp.transitions[u] * &v;
        for x in 0..mdp.n_states {
            q[(x, u)] = mdp.cost[(x, u)] + mdp.discount * pv[x];
        }
    }
    q
}

/// Transition matrix of the joint chain on `Z = X × U` under a randomized
/// policy: `T[(x,u), (x',u')] = P_u(x,x') φ(u'|x')`.
pub fn joint_transition(mdp: &FiniteMdp, policy: &RandomizedPolicy) -> DMatrix<f64> {
    let nz = mdp.n_pairs();
    let mut t = DMatrix::zeros(nz, nz);
    for x in 0..mdp.n_states {
        for u in 0..mdp.n_actions {
            let z = mdp.z_index(x, u);
            for x2 in 0..mdp.n_states {
                let p = mdp.transitions[u][(x, x2)];
                if p == 0.0 {
                    continue;
                }
                for u2 in 0..mdp.n_actions {
                    t[(z, mdp.z_index(x2, u2))] = p * policy.prob(x2, u2);
                }
            }
        }
    }
    t
}

/// Unique invariant pmf of the joint chain, or [`MdpError::Multichain`] if
/// the eigenvalue 1 of the joint transition matrix is not simple.
pub fn joint_invariant_pmf(mdp: &FiniteMdp, policy: &RandomizedPolicy) -> Result<Vec<f64>, MdpError> {
    let t = joint_transition(mdp, policy);
    let nz = t.nrows();

    let eigs = t.complex_eigenvalues();
    let ones = eigs
        .iter()
        .filter(|e| (*e - nalgebra::Complex::new(1.0, 0.0)).norm() < UNICHAIN_EIG_TOL)
        .count();
    if ones > 1 {
        return Err(MdpError::Multichain);
    }

    // π^T T = π^T with the normalization row substituted for the final
    // (redundant) balance equation.
    let mut a = t.transpose() - DMatrix::identity(nz, nz);
    for j in 0..nz {
        a[(nz - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(nz);
    rhs[nz - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| MdpError::InvalidModel("stationary-balance system is singular".into()))?;

    let mut pmf: Vec<f64> = pi.iter().map(|p| p.max(0.0)).collect();
    let total: f64 = pmf.iter().sum();
    for p in &mut pmf {
        *p /= total;
    }

    let residual = (DVector::from_column_slice(&pmf).transpose() * &t
        - DVector::from_column_slice(&pmf).transpose())
    .amax();
    if residual > PMF_FIXED_POINT_TOL {
        return Err(MdpError::InvalidModel(format!(
            "invariant pmf residual {residual} exceeds {PMF_FIXED_POINT_TOL}"
        )));
    }
    Ok(pmf)
}

/// Small birth-death benchmark model used throughout the test and example
/// suites: action 0 drifts left, action 1 drifts right, both with slip 0.2;
/// irreducible for `n >= 2`.  Cost grows with distance from state 0 and
/// action 1 carries a surcharge, so the optimal policy is nontrivial.
pub fn chain_walk(n: usize, gamma: f64) -> FiniteMdp {
    let mut p0 = DMatrix::zeros(n, n);
    let mut p1 = DMatrix::zeros(n, n);
    for x in 0..n {
        let left = x.saturating_sub(1);
        let right = (x + 1).min(n - 1);
        p0[(x, left)] += 0.8;
        p0[(x, right)] += 0.2;
        p1[(x, left)] += 0.2;
        p1[(x, right)] += 0.8;
    }
    let mut cost = DMatrix::zeros(n, 2);
    for x in 0..n {
        cost[(x, 0)] = x as f64 / n as f64;
        cost[(x, 1)] = x as f64 / n as f64 + 0.3;
    }
    FiniteMdp::new(vec![p0, p1], cost, gamma).unwrap()
}

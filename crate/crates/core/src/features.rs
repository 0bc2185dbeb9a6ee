//! Linear Q-function approximation `Q^θ(x,u) = θᵀψ(x,u)`, temporal-difference
//! terms, and eligibility-vector generators.
//!
//! The eligibility vectors ζ are the multipliers that turn the conditional
//! Bellman inequality into finitely many moment constraints; they must be
//! componentwise nonnegative for that relaxation to be valid, and here they
//! are functions of the current state-action pair only.

use crate::mdp::FiniteMdp;
use crate::simulate::Step;

/// Basis functions ψ (dimension `d`) and eligibility vectors ζ (dimension
/// `const_d`) over states of type `S`.
pub struct FeatureMap<S> {
    d: usize,
    const_d: usize,
    n_actions: usize,
    psi: Box<dyn Fn(&S, usize) -> Vec<f64> + Send + Sync>,
    zeta: Box<dyn Fn(&S, usize) -> Vec<f64> + Send + Sync>,
}

impl<S> FeatureMap<S> {
    pub fn new(
        d: usize,
        const_d: usize,
        n_actions: usize,
        psi: impl Fn(&S, usize) -> Vec<f64> + Send + Sync + 'static,
        zeta: impl Fn(&S, usize) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        assert!(d >= 1 && const_d >= 1 && n_actions >= 1);
        FeatureMap { d, const_d, n_actions, psi: Box::new(psi), zeta: Box::new(zeta) }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn const_d(&self) -> usize {
        self.const_d
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn psi(&self, x: &S, u: usize) -> Vec<f64> {
        let v = (self.psi)(x, u);
        debug_assert_eq!(v.len(), self.d);
        debug_assert!(v.iter().all(|t| t.is_finite()));
        v
    }

    pub fn zeta(&self, x: &S, u: usize) -> Vec<f64> {
        let v = (self.zeta)(x, u);
        debug_assert_eq!(v.len(), self.const_d);
        v
    }
}

/// One-hot basis over state-action pairs: `d = const_d = |Z|`, ζ = ψ.  With
/// these features the convex program's constraint set is the full Bellman
/// inequality system, so its solution is the exact Q-function.
pub fn tabular_basis(mdp: &FiniteMdp) -> FeatureMap<usize> {
    let nz = mdp.n_pairs();
    let n_actions = mdp.n_actions();
    let one_hot = move |x: &usize, u: usize| {
        let mut v = vec![0.0; nz];
        v[x * n_actions + u] = 1.0;
        v
    };
    FeatureMap::new(nz, nz, n_actions, one_hot, one_hot)
}

/// Indicator eligibility vectors over bins of the real line:
/// `ζ^i(x) = 1{edges[i] <= x <= edges[i+1]}`.  Intervals are closed on both
/// ends, so a point on an interior edge activates two indicators; a point
/// outside the covered range yields the zero vector.
pub fn binned_indicator_zeta(edges: Vec<f64>) -> impl Fn(&f64, usize) -> Vec<f64> + Send + Sync {
    assert!(edges.len() >= 2);
    assert!(edges.windows(2).all(|w| w[0] < w[1]), "edges must be strictly increasing");
    move |x: &f64, _u: usize| {
        let mut v = vec![0.0; edges.len() - 1];
        for i in 0..edges.len() - 1 {
            if edges[i] <= *x && *x <= edges[i + 1] {
                v[i] = 1.0;
            }
        }
        v
    }
}

/// A parameter vector paired with its feature map.
pub struct LinearQ<'a, S> {
    pub features: &'a FeatureMap<S>,
    pub theta: Vec<f64>,
}

impl<'a, S> LinearQ<'a, S> {
    pub fn new(features: &'a FeatureMap<S>, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), features.d());
        assert!(theta.iter().all(|t| t.is_finite()));
        LinearQ { features, theta }
    }

    /// `Q^θ(x, u) = θᵀψ(x, u)`.
    pub fn q_value(&self, x: &S, u: usize) -> f64 {
        dot(&self.theta, &self.features.psi(x, u))
    }

    /// `min_u Q^θ(x, u)` with the tie-broken (smallest-index) argmin.
    pub fn underline_q(&self, x: &S) -> (f64, usize) {
        let mut best_val = self.q_value(x, 0);
        let mut best_u = 0;
        for u in 1..self.features.n_actions() {
            let v = self.q_value(x, u);
            if v < best_val {
                best_val = v;
                best_u = u;
            }
        }
        (best_val, best_u)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Temporal difference along one transition:
/// `D(θ) = -Q^θ(x,u) + c + γ min_u' Q^θ(x',u')`.
///
/// Concave in θ (a pointwise minimum of affine functions), which is what
/// makes `-D(θ)ζ` with ζ ≥ 0 a valid convex constraint.
pub fn td_term<S>(q: &LinearQ<'_, S>, step: &Step<S>, gamma: f64) -> f64 {
    let (underline, _) = q.underline_q(&step.next_state);
    -q.q_value(&step.state, step.action) + step.cost + gamma * underline
}

/// Policy-fixed temporal difference: the next-state value is read at a given
/// action instead of the minimizer, so `td_term_policy >= td_term` always,
/// with equality when `next_action` is greedy.
pub fn td_term_policy<S>(q: &LinearQ<'_, S>, step: &Step<S>, gamma: f64, next_action: usize) -> f64 {
    -q.q_value(&step.state, step.action) + step.cost + gamma * q.q_value(&step.next_state, next_action)
}

/// Relative temporal difference: subtracts `δ ⟨ω, Q^θ⟩` from [`td_term`],
/// with the pmf ω entering only through its feature mean `Σ_z ω(z) ψ(z)`.
/// The relative Q-function shares the parameterization of `Q^θ`, so the
/// entire shift is carried by the δ term.
pub fn relative_td_term<S>(
    q: &LinearQ<'_, S>,
    step: &Step<S>,
    gamma: f64,
    omega_feature_mean: &[f64],
    delta: f64,
) -> f64 {
    td_term(q, step, gamma) - delta * dot(&q.theta, omega_feature_mean)
}

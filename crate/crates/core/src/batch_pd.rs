//! Batch primal-dual solver for the convex Q-learning program: the data is
//! split into batches, the parameter takes one proximal (implicit) or
//! subgradient (explicit) step per batch against a regularized Lagrangian,
//! and a multiplier vector tracks the constraint values on the fresh batch.
//!
//! The stage objective is `L_n(θ,λ) = -θ'μ̄ + R_n(θ) - ⟨π_n, D(θ)ζ'λ⟩` with
//! regularizer `R_n(θ) = κ {[⟨π_n, D(θ)ζ'λ_n⟩]_-}² + ε‖θ‖²`, λ frozen at
//! λ_n inside `R_n`.  Multipliers ascend the dual: λ moves along the batch
//! constraint value ḡ and is clipped at zero, so slack constraints relax to
//! λ_i = 0 and violated ones gain weight until the primal responds.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cvxq::StepTerm;
use crate::features::{dot, FeatureMap};
use crate::simulate::Trajectory;

const PROX_MOVE_CAP: usize = 500;

#[derive(Debug)]
pub enum BatchPdError {
    ProxDivergence { batch: usize, residual: f64 },
}

impl std::fmt::Display for BatchPdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BatchPdError::ProxDivergence { batch, residual } => write!(
                f,
                "proximal iteration diverged at batch {batch} (residual {residual:.3e}); \
                 reduce the primal step size"
            ),
        }
    }
}

impl std::error::Error for BatchPdError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, Copy)]
pub struct Regularizer {
    pub kappa: f64,
    pub epsilon: f64,
}

impl Default for Regularizer {
    fn default() -> Self {
        Regularizer { kappa: 1.0, epsilon: 1e-3 }
    }
}

impl Regularizer {
    fn validate(&self) {
        assert!(self.kappa > 0.0 && self.epsilon > 0.0, "regularizer weights must be positive");
    }
}

/// Batch boundaries `T_0 = 0 < ... < T_B = N` plus the step-size sequences
/// for the B updates.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    pub boundaries: Vec<usize>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl BatchSchedule {
    /// Equal-length batches with `α_n = a/(n+n0)` and `β_n = b/(n+n0)^0.6`,
    /// n = 1..B.  The polynomial exponents make α_n/β_n → 0.
    pub fn equal_batches(n_steps: usize, n_batches: usize, a: f64, b: f64, n0: f64) -> Self {
        assert!(n_batches >= 1 && n_batches <= n_steps);
        assert!(a > 0.0 && b > 0.0 && n0 >= 0.0);
        let boundaries: Vec<usize> =
            (0..=n_batches).map(|i| i * n_steps / n_batches).collect();
        let alphas: Vec<f64> = (1..=n_batches).map(|n| a / (n as f64 + n0)).collect();
        let betas: Vec<f64> = (1..=n_batches).map(|n| b / (n as f64 + n0).powf(0.6)).collect();
        let s = BatchSchedule { boundaries, alphas, betas };
        s.validate();
        s
    }

    pub fn n_batches(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn validate(&self) {
        assert!(self.boundaries.len() >= 2);
        assert_eq!(self.boundaries[0], 0);
        assert!(self.boundaries.windows(2).all(|w| w[0] < w[1]), "boundaries must increase");
        let n = self.n_batches();
        assert_eq!(self.alphas.len(), n);
        assert_eq!(self.betas.len(), n);
        assert!(self.alphas.iter().chain(&self.betas).all(|s| *s > 0.0));
        // two-timescale ordering on the generated schedule
        let first = self.alphas[0] / self.betas[0];
        let last = self.alphas[n - 1] / self.betas[n - 1];
        assert!(n == 1 || last < first, "α/β must decrease along the schedule");
    }
}

#[derive(Debug, Clone)]
pub struct DualState {
    /// Multipliers, componentwise nonnegative.
    pub lambda: Vec<f64>,
    /// Smoothed estimate of the batch constraint values.
    pub v: Vec<f64>,
}

impl DualState {
    pub fn zeros(const_d: usize) -> Self {
        DualState { lambda: vec![0.0; const_d], v: vec![0.0; const_d] }
    }
}

/// Per-step data for batch averages: every trajectory step becomes one term
/// of unit weight, zero-eligibility steps included (they only widen the
/// batch divisor, matching the empirical batch pmf).
pub fn collect_terms<S>(traj: &Trajectory<S>, features: &FeatureMap<S>) -> Vec<StepTerm> {
    traj.steps
        .iter()
        .map(|s| StepTerm {
            weight: 1.0,
            psi: features.psi(&s.state, s.action),
            cost: s.cost,
            zeta: features.zeta(&s.state, s.action),
            next_psi: (0..features.n_actions()).map(|u| features.psi(&s.next_state, u)).collect(),
        })
        .collect()
}

fn greedy_index(theta: &[f64], next_psi: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_v = dot(theta, &next_psi[0]);
    for (u, psi_u) in next_psi.iter().enumerate().skip(1) {
        let v = dot(theta, psi_u);
        if v < best_v {
            best_v = v;
            best = u;
        }
    }
    best
}

/// Batch average of `D_{k+1}(θ) ζ_k` over the slice.
fn dbar_zeta(terms: &[StepTerm], theta: &[f64], gamma: f64, const_d: usize) -> Vec<f64> {
    let mut out = vec![0.0; const_d];
    if terms.is_empty() {
        return out;
    }
    for t in terms {
        let j = greedy_index(theta, &t.next_psi);
        let d_val = t.cost - dot(theta, &t.psi) + gamma * dot(theta, &t.next_psi[j]);
        for (o, z) in out.iter_mut().zip(&t.zeta) {
            if *z != 0.0 {
                *o += d_val * z;
            }
        }
    }
    let n = terms.len() as f64;
    for o in &mut out {
        *o /= n;
    }
    out
}

/// Batch constraint value `ḡ = ⟨π_batch, -D(θ)ζ⟩`.
pub fn batch_gbar(terms: &[StepTerm], theta: &[f64], gamma: f64, const_d: usize) -> Vec<f64> {
    dbar_zeta(terms, theta, gamma, const_d).iter().map(|v| -v).collect()
}

/// `G(θ)'λ` where row i of G is the batch average of
/// `ζ_k^i (-ψ_k + γ ψ(x_{k+1}, φ^θ(x_{k+1})))`, the subgradient of the
/// multiplier term with the greedy action selection.
fn grad_term(terms: &[StepTerm], theta: &[f64], lambda: &[f64], gamma: f64, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    if terms.is_empty() {
        return out;
    }
    for t in terms {
        let w = t.zeta.iter().zip(lambda).map(|(z, l)| z * l).sum::<f64>();
        if w == 0.0 {
            continue;
        }
        let j = greedy_index(theta, &t.next_psi);
        for ((o, p), q) in out.iter_mut().zip(&t.psi).zip(&t.next_psi[j]) {
            *o += w * (-p + gamma * q);
        }
    }
    let n = terms.len() as f64;
    for o in &mut out {
        *o /= n;
    }
    out
}

/// Value and θ-subgradient of the stage objective `L_n(θ, λ)` on one batch.
/// λ enters both the multiplier term and the frozen regularizer argument.
pub fn batch_objective(
    terms: &[StepTerm],
    mu_feature_mean: &[f64],
    theta: &[f64],
    lambda: &[f64],
    reg: &Regularizer,
    gamma: f64,
) -> (f64, Vec<f64>) {
    reg.validate();
    let d = theta.len();
    let dbar = dbar_zeta(terms, theta, gamma, lambda.len());
    let m = dot(&dbar, lambda);
    let m_minus = (-m).max(0.0);
    let value = -dot(theta, mu_feature_mean)
        + reg.kappa * m_minus * m_minus
        + reg.epsilon * dot(theta, theta)
        - m;
    let g_lambda = grad_term(terms, theta, lambda, gamma, d);
    let scale = 1.0 + 2.0 * reg.kappa * m_minus;
    let mut grad = vec![0.0; d];
    for j in 0..d {
        grad[j] = -mu_feature_mean[j] + 2.0 * reg.epsilon * theta[j] - scale * g_lambda[j];
    }
    (value, grad)
}

/// One subgradient step: `θ_{n+1} = θ_n - α ∂L_n(θ_n, λ)`.
pub fn explicit_step(
    terms: &[StepTerm],
    mu_feature_mean: &[f64],
    theta: &[f64],
    lambda: &[f64],
    reg: &Regularizer,
    gamma: f64,
    alpha: f64,
) -> Vec<f64> {
    assert!(alpha > 0.0);
    let (_, grad) = batch_objective(terms, mu_feature_mean, theta, lambda, reg, gamma);
    theta.iter().zip(&grad).map(|(t, g)| t - alpha * g).collect()
}

/// Affine restriction `m_A(y) = m0 + q·y` of the multiplier average once a
/// greedy assignment pins every step's next-state action.
struct PinnedPiece {
    m0: f64,
    q: Vec<f64>,
}

fn pinned_piece(
    terms: &[StepTerm],
    lambda: &[f64],
    gamma: f64,
    assign: &[usize],
    d: usize,
) -> PinnedPiece {
    let mut m0 = 0.0;
    let mut q = vec![0.0; d];
    if terms.is_empty() {
        return PinnedPiece { m0, q };
    }
    for (t, a) in terms.iter().zip(assign) {
        let w = t.zeta.iter().zip(lambda).map(|(z, l)| z * l).sum::<f64>();
        if w == 0.0 {
            continue;
        }
        m0 += w * t.cost;
        for ((qj, p), np) in q.iter_mut().zip(&t.psi).zip(&t.next_psi[*a]) {
            *qj += w * (-p + gamma * np);
        }
    }
    let n = terms.len() as f64;
    m0 /= n;
    for qj in &mut q {
        *qj /= n;
    }
    PinnedPiece { m0, q }
}

struct PlaneMember {
    term: usize,
    side: usize,
    other: usize,
    /// +1 when the member's raw normal equals the plane's canonical one.
    orient: f64,
    /// `γ λ'ζ_k / n`: subgradient jump along the raw normal, up to the
    /// hinge magnitude factor applied at test time.
    jump_w: f64,
}

/// A greedy-flip hyperplane `{y : y·normal = 0}` the prox search slides
/// along.  Steps whose flip produces the same geometric plane share it, so
/// the constraint rows stay linearly independent and their jumps add.
struct KinkPlane {
    normal: Vec<f64>,
    members: Vec<PlaneMember>,
}

impl KinkPlane {
    /// Range of subgradient-hull coefficients along the canonical normal.
    fn jump_bounds(&self, hinge_mag: f64) -> (f64, f64) {
        let mut lo = 0.0;
        let mut hi = 0.0;
        for m in &self.members {
            if m.orient > 0.0 {
                hi += hinge_mag * m.jump_w;
            } else {
                lo -= hinge_mag * m.jump_w;
            }
        }
        (lo, hi)
    }
}

/// Solves `[H N'; N 0] [y; ν] = [lin; row_rhs]` and rejects singular or
/// numerically inconsistent systems.
fn kkt_solve(
    h: &DMatrix<f64>,
    rows: &[&[f64]],
    row_rhs: &[f64],
    lin: &[f64],
) -> Option<(Vec<f64>, Vec<f64>)> {
    let d = h.nrows();
    let p = rows.len();
    let dim = d + p;
    let mut m = DMatrix::<f64>::zeros(dim, dim);
    m.view_mut((0, 0), (d, d)).copy_from(h);
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            m[(d + i, j)] = *v;
            m[(j, d + i)] = *v;
        }
    }
    let mut rhs = DVector::<f64>::zeros(dim);
    rhs.as_mut_slice()[..d].copy_from_slice(lin);
    rhs.as_mut_slice()[d..].copy_from_slice(row_rhs);
    let sol = m.clone().lu().solve(&rhs)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let resid = (&m * &sol - &rhs).amax();
    if resid > 1e-7 * rhs.amax().max(1.0) {
        return None;
    }
    Some((sol.as_slice()[..d].to_vec(), sol.as_slice()[d..].to_vec()))
}

/// Exact minimizer of the pinned-piece prox objective over the plane set.
/// The hinge `κ[m]_-²` splits the piece into two quadratic regimes joined
/// C¹ at `m = 0`; each regime is solved in closed form and checked for sign
/// consistency, with the `m = 0` face as the fallback between them.
fn pinned_min(
    piece: &PinnedPiece,
    planes: &[KinkPlane],
    a: f64,
    r0: &[f64],
    kappa: f64,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let d = r0.len();
    let rows: Vec<&[f64]> = planes.iter().map(|p| p.normal.as_slice()).collect();
    let zeros = vec![0.0; rows.len()];
    let m_tol = 1e-10 * (1.0 + piece.m0.abs());
    let m_at = |y: &[f64]| piece.m0 + dot(&piece.q, y);

    let h0 = DMatrix::<f64>::identity(d, d) * a;
    let lin0: Vec<f64> = r0.iter().zip(&piece.q).map(|(r, q)| r + q).collect();
    if let Some((y, nu)) = kkt_solve(&h0, &rows, &zeros, &lin0) {
        if m_at(&y) >= -m_tol {
            return Some((y, nu));
        }
    }

    let mut h1 = DMatrix::<f64>::identity(d, d) * a;
    for i in 0..d {
        for j in 0..d {
            h1[(i, j)] += 2.0 * kappa * piece.q[i] * piece.q[j];
        }
    }
    let lin1: Vec<f64> =
        lin0.iter().zip(&piece.q).map(|(l, q)| l - 2.0 * kappa * piece.m0 * q).collect();
    if let Some((y, nu)) = kkt_solve(&h1, &rows, &zeros, &lin1) {
        if m_at(&y) <= m_tol {
            return Some((y, nu));
        }
    }

    let mut rows_m = rows.clone();
    rows_m.push(&piece.q);
    let mut rhs_m = zeros.clone();
    rhs_m.push(-piece.m0);
    kkt_solve(&h0, &rows_m, &rhs_m, &lin0).map(|(y, mut nu)| {
        nu.pop();
        (y, nu)
    })
}

/// Checks the stationarity certificate `ν_p ∈ [lo_p, hi_p]` plane by plane.
/// A multiplier outside its jump interval names the plane to release and
/// which members cross to their other action.
fn release_candidate(
    planes: &[KinkPlane],
    nus: &[f64],
    hinge_mag: f64,
) -> Option<(usize, bool)> {
    let mut worst: Option<(usize, bool, f64)> = None;
    for (i, (p, nu)) in planes.iter().zip(nus).enumerate() {
        let (lo, hi) = p.jump_bounds(hinge_mag);
        let tol = 1e-12 + 1e-9 * (hi - lo);
        if nu - hi > tol && worst.is_none_or(|(_, _, w)| nu - hi > w) {
            worst = Some((i, true, nu - hi));
        }
        if lo - nu > tol && worst.is_none_or(|(_, _, w)| lo - nu > w) {
            worst = Some((i, false, lo - nu));
        }
    }
    worst.map(|(i, f, _)| (i, f))
}

/// Pins every unpinned greedy-flip plane passing through `y` (weighted
/// steps only; zero-eligibility steps never enter the multiplier term).
fn pin_tied_planes(
    terms: &[StepTerm],
    lambda: &[f64],
    gamma: f64,
    y: &[f64],
    assign: &[usize],
    planes: &mut Vec<KinkPlane>,
) -> usize {
    let n = terms.len() as f64;
    let y_scale = 1.0 + norm(y);
    let mut added = 0;
    for (k, t) in terms.iter().enumerate() {
        let w = t.zeta.iter().zip(lambda).map(|(z, l)| z * l).sum::<f64>();
        if w <= 0.0 {
            continue;
        }
        let side = assign[k];
        for (u, psi_u) in t.next_psi.iter().enumerate() {
            if u == side {
                continue;
            }
            if planes.iter().any(|p| p.members.iter().any(|m| m.term == k && m.other == u)) {
                continue;
            }
            let raw: Vec<f64> =
                t.next_psi[side].iter().zip(psi_u).map(|(a, b)| a - b).collect();
            let nn = norm(&raw);
            if nn <= 1e-14 {
                continue;
            }
            if dot(y, &raw).abs() > 1e-9 * y_scale * (1.0 + nn) {
                continue;
            }
            let lead = raw.iter().find(|v| **v != 0.0).copied().unwrap_or(1.0);
            let orient = if lead < 0.0 { -1.0 } else { 1.0 };
            let canon: Vec<f64> = raw.iter().map(|v| v * orient).collect();
            let member =
                PlaneMember { term: k, side, other: u, orient, jump_w: gamma * w / n };
            match planes.iter_mut().find(|p| p.normal == canon) {
                Some(p) => p.members.push(member),
                None => planes.push(KinkPlane { normal: canon, members: vec![member] }),
            }
            added += 1;
        }
    }
    added
}

/// Exact minimizer of the prox objective restricted to the chord
/// `y + t·dir`, `t ∈ (0, 1]`.  The restriction is convex piecewise
/// quadratic: greedy flips give the breakpoints (per-term lower envelopes
/// of affine values) and the hinge of `κ[m]_-²` splits each piece at
/// `m = 0`.  Returns the analytic argmin and its decrease against `t = 0`;
/// the caller re-checks the decrease on the full objective.
#[allow(clippy::too_many_arguments)]
fn chord_min(
    terms: &[StepTerm],
    lambda: &[f64],
    gamma: f64,
    reg: &Regularizer,
    mu_feature_mean: &[f64],
    theta: &[f64],
    alpha: f64,
    y: &[f64],
    dir: &[f64],
) -> (f64, f64) {
    let n = terms.len().max(1) as f64;
    // per-term (value, slope) of y·ψ' + t dir·ψ' for each action, with the
    // greedy choice at t = 0+ (value ties broken by slope)
    let mut assign = Vec::with_capacity(terms.len());
    let mut vals: Vec<Vec<(f64, f64)>> = Vec::with_capacity(terms.len());
    let mut weights = Vec::with_capacity(terms.len());
    for t in terms {
        let vs: Vec<(f64, f64)> = t.next_psi.iter().map(|p| (dot(y, p), dot(dir, p))).collect();
        let mut best = 0;
        for (u, (v, s)) in vs.iter().enumerate().skip(1) {
            let (bv, bs) = vs[best];
            let tie = 1e-15 * (1.0 + bv.abs());
            if *v < bv - tie || ((*v - bv).abs() <= tie && *s < bs) {
                best = u;
            }
        }
        assign.push(best);
        vals.push(vs);
        weights.push(t.zeta.iter().zip(lambda).map(|(z, l)| z * l).sum::<f64>() / n);
    }

    // m(t) = m_c + m_s t on the current piece; events keep it continuous
    let mut m_c = 0.0;
    let mut m_s = 0.0;
    for ((t, a), (vs, w)) in terms.iter().zip(&assign).zip(vals.iter().zip(&weights)) {
        if *w == 0.0 {
            continue;
        }
        m_c += w * (t.cost - dot(y, &t.psi) + gamma * vs[*a].0);
        m_s += w * (-dot(dir, &t.psi) + gamma * vs[*a].1);
    }
    let a2 = (reg.epsilon + 0.5 / alpha) * dot(dir, dir);
    let b1 = -dot(dir, mu_feature_mean)
        + 2.0 * reg.epsilon * dot(dir, y)
        + (dot(dir, y) - dot(dir, theta)) / alpha;
    let h = |m: f64| reg.kappa * (-m).max(0.0) * (-m).max(0.0) - m;
    let h0 = h(m_c);

    // greedy-flip events: walk each term's lower envelope (slopes strictly
    // decrease along it, so at most n_actions - 1 events per term)
    struct Ev {
        t: f64,
        k: usize,
        u: usize,
    }
    let mut evs: Vec<Ev> = Vec::new();
    for (k, vs) in vals.iter().enumerate() {
        if weights[k] == 0.0 {
            continue;
        }
        let mut side = assign[k];
        let mut t_cur = 0.0;
        loop {
            let (sv, ss) = vs[side];
            let mut next: Option<(f64, usize)> = None;
            for (u, (v, s)) in vs.iter().enumerate() {
                if u == side || *s >= ss {
                    continue;
                }
                let t_x = (v - sv) / (ss - s);
                if t_x > t_cur && t_x <= 1.0 && next.is_none_or(|(tn, _)| t_x < tn) {
                    next = Some((t_x, u));
                }
            }
            match next {
                Some((t_x, u)) => {
                    evs.push(Ev { t: t_x, k, u });
                    side = u;
                    t_cur = t_x;
                }
                None => break,
            }
        }
    }
    evs.sort_by(|a, b| a.t.total_cmp(&b.t));

    // walk the segments, minimizing the segment quadratic in closed form
    let phi = |t: f64, mc: f64, ms: f64| a2 * t * t + b1 * t + h(mc + ms * t) - h0;
    let mut best = (0.0, 0.0);
    let consider = |t: f64, mc: f64, ms: f64, best: &mut (f64, f64)| {
        if t > 0.0 {
            let v = phi(t, mc, ms);
            if v < best.1 {
                *best = (t, v);
            }
        }
    };
    let mut t_lo = 0.0;
    let mut ei = 0;
    loop {
        let t_hi = if ei < evs.len() { evs[ei].t.min(1.0) } else { 1.0 };
        if t_hi > t_lo {
            // regime m >= 0: φ = a2 t² + (b1 - m_s) t - m_c
            if a2 > 0.0 {
                let t_m = (m_s - b1) / (2.0 * a2);
                if t_m > t_lo && t_m < t_hi && m_c + m_s * t_m >= 0.0 {
                    consider(t_m, m_c, m_s, &mut best);
                }
                // regime m < 0: adds κ(m_c + m_s t)²
                let aq = a2 + reg.kappa * m_s * m_s;
                let bq = b1 - m_s + 2.0 * reg.kappa * m_c * m_s;
                let t_m = -bq / (2.0 * aq);
                if t_m > t_lo && t_m < t_hi && m_c + m_s * t_m < 0.0 {
                    consider(t_m, m_c, m_s, &mut best);
                }
            }
            if m_s != 0.0 {
                let t_h = -m_c / m_s;
                if t_h > t_lo && t_h < t_hi {
                    consider(t_h, m_c, m_s, &mut best);
                }
            }
            consider(t_hi, m_c, m_s, &mut best);
        }
        if ei >= evs.len() || t_hi >= 1.0 {
            break;
        }
        // flip term k to action u; m stays continuous across the event
        let ev = &evs[ei];
        let old = assign[ev.k];
        let w = weights[ev.k];
        m_c += w * gamma * (vals[ev.k][ev.u].0 - vals[ev.k][old].0);
        m_s += w * gamma * (vals[ev.k][ev.u].1 - vals[ev.k][old].1);
        assign[ev.k] = ev.u;
        t_lo = ev.t;
        ei += 1;
    }
    best
}

/// Proximal step: minimizes `L_n(θ, λ) + ‖y - θ_n‖²/(2α)` exactly.  The
/// objective is piecewise quadratic (pieces indexed by the greedy action
/// assignment), so the search alternates closed-form solves of the active
/// piece with strict-descent moves judged on the true objective, pinning a
/// greedy-flip plane whenever it blocks the chord.  At a pinned stationary
/// point the plane multipliers are tested against the subgradient jump
/// intervals: all inside means the zero vector lies in the subdifferential
/// and the point is the exact global prox minimizer.  Divergence is reported
/// only for non-finite data or an exhausted move budget, never silently.
pub fn implicit_step(
    terms: &[StepTerm],
    mu_feature_mean: &[f64],
    theta: &[f64],
    lambda: &[f64],
    reg: &Regularizer,
    gamma: f64,
    alpha: f64,
) -> Result<Vec<f64>, BatchPdError> {
    assert!(alpha > 0.0);
    reg.validate();
    let d = theta.len();
    let fail = |residual: f64| BatchPdError::ProxDivergence { batch: usize::MAX, residual };
    let pf = |y: &[f64]| -> f64 {
        let (v, _) = batch_objective(terms, mu_feature_mean, y, lambda, reg, gamma);
        v + y.iter().zip(theta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * alpha)
    };
    let a = 2.0 * reg.epsilon + 1.0 / alpha;
    let r0: Vec<f64> = mu_feature_mean.iter().zip(theta).map(|(m, t)| m + t / alpha).collect();
    let scale = 1.0 + norm(theta);

    let mut y = theta.to_vec();
    let mut f_y = pf(&y);
    if !f_y.is_finite() {
        return Err(fail(f64::NAN));
    }
    let mut assign: Vec<usize> =
        terms.iter().map(|t| greedy_index(theta, &t.next_psi)).collect();
    let mut planes: Vec<KinkPlane> = Vec::new();
    let mut last_move = f64::INFINITY;

    for _ in 0..PROX_MOVE_CAP {
        let piece = pinned_piece(terms, lambda, gamma, &assign, d);
        let Some((cand, nus)) = pinned_min(&piece, &planes, a, &r0, reg.kappa) else {
            // dependent plane rows; drop the newest and retry
            match planes.pop() {
                Some(_) => continue,
                None => return Err(fail(f64::NAN)),
            }
        };
        if !cand.iter().all(|c| c.is_finite()) {
            return Err(fail(f64::NAN));
        }
        let move_norm =
            cand.iter().zip(&y).map(|(c, v)| (c - v) * (c - v)).sum::<f64>().sqrt();
        if move_norm <= 1e-12 * scale {
            let hinge_mag = 1.0 + 2.0 * reg.kappa * (-(piece.m0 + dot(&piece.q, &y))).max(0.0);
            match release_candidate(&planes, &nus, hinge_mag) {
                None => return Ok(y),
                Some((idx, flip_positive)) => {
                    let plane = planes.remove(idx);
                    let mut flipped = Vec::new();
                    for m in plane.members {
                        if (m.orient > 0.0) == flip_positive {
                            assign[m.term] = m.other;
                            flipped.push(m.term);
                        }
                    }
                    // sibling pins on a flipped term hold a stale side
                    planes.retain(|p| p.members.iter().all(|m| !flipped.contains(&m.term)));
                    continue;
                }
            }
        }
        let dir: Vec<f64> = cand.iter().zip(&y).map(|(c, v)| c - v).collect();
        let (t_star, dec) =
            chord_min(terms, lambda, gamma, reg, mu_feature_mean, theta, alpha, &y, &dir);
        let mut accepted = false;
        if t_star > 0.0 && dec < -1e-15 * (1.0 + f_y.abs()) {
            let probe: Vec<f64> = y.iter().zip(&dir).map(|(v, g)| v + t_star * g).collect();
            let f_p = pf(&probe);
            if f_p < f_y - 1e-15 * (1.0 + f_y.abs()) {
                y = probe;
                f_y = f_p;
                accepted = true;
            }
        }
        last_move = move_norm;
        if !accepted {
            // a kink at y blocks the chord; slide along it instead
            if pin_tied_planes(terms, lambda, gamma, &y, &assign, &mut planes) == 0 {
                return if move_norm <= 1e-7 * scale { Ok(y) } else { Err(fail(move_norm)) };
            }
            continue;
        }
        for (ak, term) in assign.iter_mut().zip(terms) {
            *ak = greedy_index(&y, &term.next_psi);
        }
        for p in &planes {
            for m in &p.members {
                assign[m.term] = m.side;
            }
        }
    }
    Err(fail(last_move))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Multiplier update: `v' = v + β (ḡ_batch - v)`, `λ' = [λ + α v']_+`.
pub fn dual_step(state: &DualState, gbar_batch: &[f64], alpha: f64, beta: f64) -> DualState {
    assert!(alpha > 0.0 && beta > 0.0);
    assert_eq!(state.v.len(), gbar_batch.len());
    let v: Vec<f64> =
        state.v.iter().zip(gbar_batch).map(|(vi, gi)| vi + beta * (gi - vi)).collect();
    let lambda: Vec<f64> =
        state.lambda.iter().zip(&v).map(|(li, vi)| (li + alpha * vi).max(0.0)).collect();
    DualState { lambda, v }
}

/// End-of-run optimality diagnostics evaluated on the full data set.
#[derive(Debug, Clone, Serialize)]
pub struct SaddleResiduals {
    /// Norm of the θ-subgradient of the full-data Lagrangian at (θ_B, λ_B).
    pub primal_subgradient_norm: f64,
    /// `max_i [ḡ_i(θ_B)]_+` over the full data.
    pub max_violation: f64,
    /// `max_i |λ_i · ḡ_i(θ_B)|`.
    pub complementarity: f64,
}

/// Residuals at an arbitrary point, evaluated on the given data.
pub fn saddle_residuals(
    terms: &[StepTerm],
    mu_feature_mean: &[f64],
    theta: &[f64],
    lambda: &[f64],
    reg: &Regularizer,
    gamma: f64,
) -> SaddleResiduals {
    let (_, grad) = batch_objective(terms, mu_feature_mean, theta, lambda, reg, gamma);
    let gbar = batch_gbar(terms, theta, gamma, lambda.len());
    let max_violation = gbar.iter().fold(0.0f64, |a, g| a.max(*g));
    let complementarity =
        lambda.iter().zip(&gbar).fold(0.0f64, |a, (l, g)| a.max((l * g).abs()));
    SaddleResiduals {
        primal_subgradient_norm: norm(&grad),
        max_violation,
        complementarity,
    }
}

/// Componentwise mean of the last `frac` fraction of rows.  The iterates
/// spiral around the saddle, so the tail mean sits much closer to it than
/// the final iterate does.
pub fn tail_average(rows: &[Vec<f64>], frac: f64) -> Vec<f64> {
    assert!(frac > 0.0 && frac <= 1.0);
    assert!(!rows.is_empty());
    let lo = ((rows.len() as f64) * (1.0 - frac)) as usize;
    let tail = &rows[lo.min(rows.len() - 1)..];
    let mut out = vec![0.0; rows[0].len()];
    for row in tail {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let m = tail.len() as f64;
    for o in &mut out {
        *o /= m;
    }
    out
}

#[derive(Debug, Clone)]
pub struct BatchPdRun {
    /// θ_0 .. θ_B.
    pub thetas: Vec<Vec<f64>>,
    /// λ_0 .. λ_B (the final entry repeats λ_{B-1} when no fresh batch
    /// remains to update it).
    pub lambdas: Vec<Vec<f64>>,
    /// v_0 .. v_B, same convention.
    pub vs: Vec<Vec<f64>>,
    pub residuals: SaddleResiduals,
}

impl BatchPdRun {
    pub fn final_theta(&self) -> &[f64] {
        self.thetas.last().expect("run holds at least θ_0")
    }

    pub fn final_lambda(&self) -> &[f64] {
        self.lambdas.last().expect("run holds at least λ_0")
    }
}

/// Full primal-dual loop over the batched trajectory.  Batch n drives the
/// primal step producing θ_{n+1}; the following batch, evaluated at θ_{n+1},
/// drives the dual step.  The last primal step has no fresh batch, so the
/// dual state is carried unchanged.
#[allow(clippy::too_many_arguments)]
pub fn run_batch_pd<S>(
    traj: &Trajectory<S>,
    features: &FeatureMap<S>,
    gamma: f64,
    mu_feature_mean: &[f64],
    schedule: &BatchSchedule,
    reg: &Regularizer,
    mode: UpdateMode,
    theta0: Option<Vec<f64>>,
) -> Result<BatchPdRun, BatchPdError> {
    schedule.validate();
    reg.validate();
    assert!(gamma > 0.0 && gamma < 1.0);
    assert_eq!(
        *schedule.boundaries.last().unwrap(),
        traj.steps.len(),
        "schedule must cover the trajectory"
    );
    let d = features.d();
    let const_d = features.const_d();
    assert_eq!(mu_feature_mean.len(), d);

    let terms = collect_terms(traj, features);
    let b = schedule.n_batches();
    let mut theta = theta0.unwrap_or_else(|| vec![0.0; d]);
    assert_eq!(theta.len(), d);
    let mut dual = DualState::zeros(const_d);

    let mut thetas = vec![theta.clone()];
    let mut lambdas = vec![dual.lambda.clone()];
    let mut vs = vec![dual.v.clone()];

    for n in 0..b {
        let batch = &terms[schedule.boundaries[n]..schedule.boundaries[n + 1]];
        let alpha = schedule.alphas[n];
        theta = match mode {
            UpdateMode::Explicit => {
                explicit_step(batch, mu_feature_mean, &theta, &dual.lambda, reg, gamma, alpha)
            }
            UpdateMode::Implicit => {
                implicit_step(batch, mu_feature_mean, &theta, &dual.lambda, reg, gamma, alpha)
                    .map_err(|e| match e {
                        BatchPdError::ProxDivergence { residual, .. } => {
                            BatchPdError::ProxDivergence { batch: n, residual }
                        }
                    })?
            }
        };
        if n + 1 < b {
            let fresh = &terms[schedule.boundaries[n + 1]..schedule.boundaries[n + 2]];
            let gbar = batch_gbar(fresh, &theta, gamma, const_d);
            dual = dual_step(&dual, &gbar, alpha, schedule.betas[n]);
        }
        thetas.push(theta.clone());
        lambdas.push(dual.lambda.clone());
        vs.push(dual.v.clone());
    }

    let residuals = saddle_residuals(&terms, mu_feature_mean, &theta, &dual.lambda, reg, gamma);
    Ok(BatchPdRun { thetas, lambdas, vs, residuals })
}

/// One row per batch: `n,theta_0..theta_{d-1},lambda_norm,violation,compl`.
/// The violation and complementarity columns are computed per batch against
/// the batch's own constraint values.
pub fn write_batch_trace_csv<S>(
    path: &Path,
    run: &BatchPdRun,
    traj: &Trajectory<S>,
    features: &FeatureMap<S>,
    gamma: f64,
    schedule: &BatchSchedule,
) -> std::io::Result<()> {
    let terms = collect_terms(traj, features);
    let d = features.d();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "n")?;
    for j in 0..d {
        write!(f, ",theta_{j}")?;
    }
    writeln!(f, ",lambda_norm,violation,complementarity")?;
    for n in 0..run.thetas.len() {
        let batch_idx = n.min(schedule.n_batches() - 1);
        let batch = &terms[schedule.boundaries[batch_idx]..schedule.boundaries[batch_idx + 1]];
        let gbar = batch_gbar(batch, &run.thetas[n], gamma, features.const_d());
        let violation = gbar.iter().fold(0.0f64, |a, g| a.max(*g));
        let compl = run.lambdas[n]
            .iter()
            .zip(&gbar)
            .fold(0.0f64, |a, (l, g)| a.max((l * g).abs()));
        write!(f, "{n}")?;
        for t in &run.thetas[n] {
            write!(f, ",{t:.17e}")?;
        }
        writeln!(f, ",{:.17e},{violation:.17e},{compl:.17e}", norm(&run.lambdas[n]))?;
    }
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvxq::{self, uniform_mu_feature_mean, ConstraintSystem};
    use crate::features::{tabular_basis, LinearQ};
    use crate::mdp::{chain_walk, greedy_policy, value_iteration, RandomizedPolicy};
    use crate::oracle::fd_gradient;
    use crate::simulate::{rollout, MdpEnv};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(
        n_steps: usize,
        seed: u64,
        gamma: f64,
    ) -> (crate::mdp::FiniteMdp, Trajectory<usize>, crate::features::FeatureMap<usize>, Vec<f64>)
    {
        let mdp = chain_walk(3, gamma);
        let env = MdpEnv::new(&mdp);
        let traj = rollout(&env, &RandomizedPolicy::uniform(3, 2), n_steps, seed);
        let features = tabular_basis(&mdp);
        let mu = uniform_mu_feature_mean(&features, 3);
        (mdp, traj, features, mu)
    }

    #[test]
    fn objective_vanishes_at_origin_with_zero_multiplier() {
        let (_, traj, features, mu) = setup(300, 1, 0.9);
        let terms = collect_terms(&traj, &features);
        let (value, _) = batch_objective(
            &terms,
            &mu,
            &vec![0.0; 6],
            &vec![0.0; 6],
            &Regularizer::default(),
            0.9,
        );
        assert_eq!(value, 0.0);
    }

    #[test]
    fn subgradient_matches_finite_differences_at_smooth_points() {
        let (_, traj, features, mu) = setup(500, 2, 0.9);
        let terms = collect_terms(&traj, &features);
        let reg = Regularizer::default();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..20 {
            let theta: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lambda: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.5)).collect();
            let (_, grad) = batch_objective(&terms, &mu, &theta, &lambda, &reg, 0.9);
            let f = |t: &[f64]| batch_objective(&terms, &mu, t, &lambda, &reg, 0.9).0;
            let fd = fd_gradient(&f, &theta, 1e-6);
            for (j, (a, b)) in grad.iter().zip(&fd).enumerate() {
                assert!((a - b).abs() <= 1e-5, "coord {j}: analytic {a}, fd {b}");
            }
        }
    }

    #[test]
    fn objective_midpoint_never_exceeds_average() {
        let (_, traj, features, mu) = setup(400, 3, 0.9);
        let terms = collect_terms(&traj, &features);
        let reg = Regularizer::default();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let t1: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t2: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lambda: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..2.0)).collect();
            let mid: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| 0.5 * (a + b)).collect();
            let f = |t: &[f64]| batch_objective(&terms, &mu, t, &lambda, &reg, 0.9).0;
            assert!(f(&mid) <= 0.5 * (f(&t1) + f(&t2)) + 1e-12);
        }
    }

    #[test]
    fn explicit_iteration_with_inactive_terms_finds_the_ridge_point() {
        // λ = 0 kills the data terms; with κ inactive the stage objective is
        // -θ'μ̄ + ε‖θ‖², minimized at μ̄/(2ε)
        let (_, traj, features, mu) = setup(200, 4, 0.9);
        let terms = collect_terms(&traj, &features);
        let reg = Regularizer { kappa: 1.0, epsilon: 1e-3 };
        let lambda = vec![0.0; 6];
        let mut theta = vec![0.0; 6];
        for _ in 0..2000 {
            theta = explicit_step(&terms, &mu, &theta, &lambda, &reg, 0.9, 100.0);
        }
        for (t, m) in theta.iter().zip(&mu) {
            assert!((t - m / (2.0 * reg.epsilon)).abs() < 1e-6, "{t} vs {}", m / 2e-3);
        }
    }

    #[test]
    fn implicit_and_explicit_steps_agree_to_second_order() {
        let (_, traj, features, mu) = setup(400, 5, 0.9);
        let terms = collect_terms(&traj, &features);
        let reg = Regularizer::default();
        let theta: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.8).collect();
        let lambda: Vec<f64> = (0..6).map(|i| 0.1 + 0.05 * i as f64).collect();
        let mut gaps = Vec::new();
        for alpha in [1e-2, 1e-3, 1e-4] {
            let exp = explicit_step(&terms, &mu, &theta, &lambda, &reg, 0.9, alpha);
            let imp = implicit_step(&terms, &mu, &theta, &lambda, &reg, 0.9, alpha).unwrap();
            gaps.push(
                exp.iter().zip(&imp).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
            );
        }
        let r1 = gaps[0] / gaps[1];
        let r2 = gaps[1] / gaps[2];
        assert!(r1 > 50.0 && r1 < 200.0, "gap ratio {r1}, gaps {gaps:?}");
        assert!(r2 > 50.0 && r2 < 200.0, "gap ratio {r2}, gaps {gaps:?}");
    }

    #[test]
    fn empty_batch_moves_along_the_objective_vector() {
        let (_, _, _, mu) = setup(10, 6, 0.9);
        let reg = Regularizer::default();
        let theta = vec![0.0; 6];
        let lambda = vec![0.3; 6];
        let alpha = 0.25;
        let next = explicit_step(&[], &mu, &theta, &lambda, &reg, 0.9, alpha);
        for (n, m) in next.iter().zip(&mu) {
            assert!((n - alpha * m).abs() < 1e-15);
        }
    }

    #[test]
    fn negative_constraint_estimates_keep_lambda_at_zero() {
        let mut state = DualState::zeros(4);
        for _ in 0..30 {
            let gbar = vec![-0.5, -0.1, -2.0, -0.01];
            state = dual_step(&state, &gbar, 0.1, 0.5);
            assert!(state.lambda.iter().all(|l| *l == 0.0));
        }
    }

    #[test]
    fn unit_smoothing_copies_the_batch_average() {
        let state = DualState { lambda: vec![0.2, 0.0], v: vec![9.0, -3.0] };
        let gbar = vec![0.7, -0.4];
        let next = dual_step(&state, &gbar, 0.5, 1.0);
        for (v, g) in next.v.iter().zip(&gbar) {
            assert!((v - g).abs() < 1e-14);
        }
        assert!((next.lambda[0] - (0.2 + 0.5 * 0.7)).abs() < 1e-14);
        assert_eq!(next.lambda[1], 0.0);
    }

    #[test]
    fn violated_constraints_grow_multipliers_until_the_primal_responds() {
        let (_, traj, features, mu) = setup(40_000, 7, 0.5);
        let schedule = BatchSchedule::equal_batches(40_000, 400, 15.0, 1.0, 10.0);
        let run = run_batch_pd(
            &traj,
            &features,
            0.5,
            &mu,
            &schedule,
            &Regularizer::default(),
            UpdateMode::Implicit,
            None,
        )
        .unwrap();
        // multipliers activated at some point
        assert!(run.lambdas.iter().any(|l| l.iter().any(|x| *x > 0.0)));
        // multipliers agree with the LP duals in aggregate: both satisfy
        // μ̄ ≈ Σ λ_i ∇ḡ_i at their optimizers, so compare total mass
        let cs = ConstraintSystem::from_trajectory(&traj, &features, 0.5, mu.clone());
        let lp = cvxq::solve_cvxq(&cs, cs.default_box_radius()).unwrap();
        let lp_mass: f64 = lp.duals.iter().sum();
        let pd_mass: f64 = tail_average(&run.lambdas, 0.25).iter().sum();
        assert!(
            (lp_mass - pd_mass).abs() <= 0.15 * lp_mass.max(1.0),
            "dual mass {pd_mass} vs LP {lp_mass}"
        );
    }

    #[test]
    fn long_equilibrium_satisfies_complementary_slackness() {
        // the lightly regularized loop spirals around the saddle with a
        // damping rate set by ε, so a tight complementarity reading needs
        // a stronger regularizer, a long single-pass run, and a tail mean
        let (_, traj, features, mu) = setup(200_000, 7, 0.5);
        let schedule = BatchSchedule::equal_batches(200_000, 200_000, 30.0, 2.0, 120.0);
        let reg = Regularizer { kappa: 5.0, epsilon: 0.1 };
        let run = run_batch_pd(
            &traj, &features, 0.5, &mu, &schedule, &reg, UpdateMode::Implicit, None,
        )
        .unwrap();
        let th_bar = tail_average(&run.thetas, 0.25);
        let la_bar = tail_average(&run.lambdas, 0.25);
        let terms = collect_terms(&traj, &features);
        let res = saddle_residuals(&terms, &mu, &th_bar, &la_bar, &reg, 0.5);
        assert!(la_bar.iter().sum::<f64>() > 1.0, "multipliers never engaged");
        assert!(res.max_violation <= 1e-3, "violation {}", res.max_violation);
        assert!(
            res.complementarity <= 1e-3,
            "complementarity {}",
            res.complementarity
        );
    }

    #[test]
    fn long_run_recovers_the_optimal_greedy_policy() {
        let (mdp, traj, features, mu) = setup(40_000, 8, 0.5);
        let schedule = BatchSchedule::equal_batches(40_000, 400, 5.0, 1.0, 10.0);
        let run = run_batch_pd(
            &traj,
            &features,
            0.5,
            &mu,
            &schedule,
            &Regularizer::default(),
            UpdateMode::Implicit,
            None,
        )
        .unwrap();
        let phi_star = greedy_policy(&value_iteration(&mdp, 1e-12));
        let q = LinearQ::new(&features, run.final_theta().to_vec());
        for x in 0..3 {
            assert_eq!(q.underline_q(&x).1, phi_star.action(x), "state {x}");
        }
    }

    #[test]
    fn implicit_and_explicit_runs_land_close() {
        let (_, traj, features, mu) = setup(40_000, 9, 0.5);
        let schedule = BatchSchedule::equal_batches(40_000, 400, 5.0, 1.0, 10.0);
        let reg = Regularizer::default();
        let imp = run_batch_pd(
            &traj, &features, 0.5, &mu, &schedule, &reg, UpdateMode::Implicit, None,
        )
        .unwrap();
        let exp = run_batch_pd(
            &traj, &features, 0.5, &mu, &schedule, &reg, UpdateMode::Explicit, None,
        )
        .unwrap();
        let gap = imp
            .final_theta()
            .iter()
            .zip(exp.final_theta())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(gap <= 1e-2, "implicit vs explicit final gap {gap}");
    }

    #[test]
    fn doubling_the_data_does_not_worsen_the_residuals() {
        // single runs land anywhere inside the noise ball around the saddle,
        // so compare the mean complementarity over a few seeds
        let reg = Regularizer { kappa: 5.0, epsilon: 0.1 };
        let mut mean_cs = Vec::new();
        for n_steps in [100_000usize, 200_000] {
            let mut total = 0.0;
            for seed in [7u64, 99, 1234] {
                let (_, traj, features, mu) = setup(n_steps, seed, 0.5);
                let schedule =
                    BatchSchedule::equal_batches(n_steps, n_steps, 30.0, 2.0, 120.0);
                let run = run_batch_pd(
                    &traj, &features, 0.5, &mu, &schedule, &reg, UpdateMode::Implicit, None,
                )
                .unwrap();
                let th_bar = tail_average(&run.thetas, 0.25);
                let la_bar = tail_average(&run.lambdas, 0.25);
                let terms = collect_terms(&traj, &features);
                let res = saddle_residuals(&terms, &mu, &th_bar, &la_bar, &reg, 0.5);
                total += res.complementarity;
            }
            mean_cs.push(total / 3.0);
        }
        assert!(
            mean_cs[1] <= mean_cs[0] + 1e-4,
            "mean complementarity grew: {:?}",
            mean_cs
        );
    }

    #[test]
    fn multipliers_stay_nonnegative_along_the_whole_run() {
        let (_, traj, features, mu) = setup(10_000, 11, 0.5);
        let schedule = BatchSchedule::equal_batches(10_000, 100, 5.0, 1.0, 10.0);
        let run = run_batch_pd(
            &traj,
            &features,
            0.5,
            &mu,
            &schedule,
            &Regularizer::default(),
            UpdateMode::Explicit,
            None,
        )
        .unwrap();
        for l in &run.lambdas {
            assert!(l.iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn accepted_implicit_steps_decrease_the_proximal_objective() {
        let (_, traj, features, mu) = setup(2_000, 12, 0.5);
        let terms = collect_terms(&traj, &features);
        let reg = Regularizer::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let theta: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lambda: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let alpha = rng.gen_range(0.05..0.5);
            let next = implicit_step(&terms, &mu, &theta, &lambda, &reg, 0.5, alpha).unwrap();
            let f = |t: &[f64]| batch_objective(&terms, &mu, t, &lambda, &reg, 0.5).0;
            let prox_gap: f64 =
                next.iter().zip(&theta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                    / (2.0 * alpha);
            assert!(f(&next) + prox_gap <= f(&theta) + 1e-10);
        }
    }

    #[test]
    fn non_finite_data_reports_prox_divergence() {
        let (_, traj, features, mu) = setup(2_000, 13, 0.9);
        let mut terms = collect_terms(&traj, &features);
        terms[7].cost = f64::NAN;
        let reg = Regularizer::default();
        let theta = vec![0.0; 6];
        let lambda = vec![0.5; 6];
        match implicit_step(&terms, &mu, &theta, &lambda, &reg, 0.9, 0.1) {
            Err(BatchPdError::ProxDivergence { .. }) => {}
            Ok(_) => panic!("poisoned batch must not produce a step"),
        }
    }

    #[test]
    fn oversized_proximal_steps_stay_on_the_objective() {
        // with a huge α the prox point is essentially the stage-objective
        // minimizer; the step must either deliver it (with the proximal
        // decrease intact) or signal divergence, never return garbage
        let (_, traj, features, mu) = setup(2_000, 13, 0.9);
        let terms = collect_terms(&traj, &features);
        let reg = Regularizer { kappa: 10.0, epsilon: 1e-3 };
        let theta = vec![0.0; 6];
        let lambda = vec![1e3; 6];
        let alpha = 1e8;
        match implicit_step(&terms, &mu, &theta, &lambda, &reg, 0.9, alpha) {
            Err(BatchPdError::ProxDivergence { .. }) => {}
            Ok(next) => {
                assert!(next.iter().all(|v| v.is_finite()));
                let f = |t: &[f64]| batch_objective(&terms, &mu, t, &lambda, &reg, 0.9).0;
                let prox_gap: f64 =
                    next.iter().zip(&theta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                        / (2.0 * alpha);
                assert!(f(&next) + prox_gap <= f(&theta) + 1e-10);
            }
        }
    }

    #[test]
    fn trace_csv_has_one_row_per_iterate() {
        let (_, traj, features, mu) = setup(2_000, 14, 0.5);
        let schedule = BatchSchedule::equal_batches(2_000, 20, 5.0, 1.0, 10.0);
        let run = run_batch_pd(
            &traj,
            &features,
            0.5,
            &mu,
            &schedule,
            &Regularizer::default(),
            UpdateMode::Explicit,
            None,
        )
        .unwrap();
        let dir = std::env::temp_dir().join("batch_pd_trace_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trace.csv");
        write_batch_trace_csv(&path, &run, &traj, &features, 0.5, &schedule).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + run.thetas.len());
        assert!(text.starts_with("n,theta_0"));
        assert!(text.lines().next().unwrap().ends_with("lambda_norm,violation,complementarity"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn schedule_construction_validates_the_two_timescale_ordering() {
        let s = BatchSchedule::equal_batches(1000, 50, 1.0, 1.0, 10.0);
        assert_eq!(s.n_batches(), 50);
        assert_eq!(s.boundaries[0], 0);
        assert_eq!(*s.boundaries.last().unwrap(), 1000);
        for n in 1..50 {
            let prev = s.alphas[n - 1] / s.betas[n - 1];
            let cur = s.alphas[n] / s.betas[n];
            assert!(cur < prev, "ratio must fall monotonically");
        }
    }
}

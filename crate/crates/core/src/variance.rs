//! Asymptotic covariance of the sampled convex-program estimator, plus a
//! randomized-constraint laboratory that validates the CLT prediction on a
//! 2-D quadratic program where every ingredient has a closed form.
//!
//! The estimator error obeys `θ_N - θ* ≈ -[Ā⁺]⁻¹ W̄_N`, where the rows of
//! Ā⁺ are the gradients of the constraints active at θ* and W̄_N averages the
//! disturbance `W_k = (β⁺_k - β̄⁺) + (A⁺_k - Ā⁺)θ*`, which collapses to the
//! active-row eligibilities times the temporal difference at θ*.  The
//! covariance sandwich `Σ_θ = [Ā⁺]⁻¹ Σ_W [Ā⁺]⁻ᵀ` then gives the scaled
//! error covariance `lim N·cov(θ_N - θ*)`.

use nalgebra::{DMatrix, DVector};

use crate::cvxq::{self, ConstraintSystem};
use crate::features::{FeatureMap, LinearQ};
use crate::mdp::{joint_invariant_pmf, FiniteMdp, RandomizedPolicy};
use crate::parallel;
use crate::simulate::{rollout_on_stream, stream_rng, MdpEnv, Trajectory};
use crate::stats;

use rand::Rng;
use rand_distr::StandardNormal;

/// Condition-number ceiling above which the sandwich is refused.
const ABAR_COND_CAP: f64 = 1e10;
/// Barrier parameter schedule: doubling from 1 until past this value.
const BARRIER_T_MAX: f64 = 1e8;
/// Newton decrement (squared, halved) stopping threshold per barrier stage.
const NEWTON_TOL: f64 = 1e-12;

#[derive(Debug)]
pub enum VarianceError {
    /// `Ā⁺` too ill-conditioned to invert meaningfully.
    SingularAbar { condition: f64 },
    /// The tight-and-positive-dual index set does not have size d.
    DegenerateActiveSet { tight: usize, positive: usize, d: usize },
    /// A replicate's sampled program failed to solve.
    SolveFailed { replicate: usize },
    /// The laboratory's limit program has an empty interior.
    InfeasibleLab,
}

impl std::fmt::Display for VarianceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VarianceError::SingularAbar { condition } => {
                write!(f, "active-constraint matrix is singular (condition {condition:.3e})")
            }
            VarianceError::DegenerateActiveSet { tight, positive, d } => write!(
                f,
                "need exactly {d} tight constraints with positive multipliers, \
                 found {tight} tight / {positive} positive"
            ),
            VarianceError::SolveFailed { replicate } => {
                write!(f, "sampled program of replicate {replicate} did not solve")
            }
            VarianceError::InfeasibleLab => {
                write!(f, "laboratory limit program has no strictly feasible point")
            }
        }
    }
}

impl std::error::Error for VarianceError {}

/// Indices that are tight and carry a strictly positive multiplier, the
/// active set the covariance construction keys on.  Errors unless exactly
/// d = `report.theta.len()` indices qualify.
pub fn active_plus_indices(report: &cvxq::SolveReport) -> Result<Vec<usize>, VarianceError> {
    let d = report.theta.len();
    let dual_max = report.duals.iter().fold(0.0f64, |a, l| a.max(*l));
    let tol = 1e-8 * dual_max.max(1.0);
    let positive: Vec<usize> = report
        .duals
        .iter()
        .enumerate()
        .filter(|(_, l)| **l > tol)
        .map(|(i, _)| i)
        .collect();
    let chosen: Vec<usize> =
        positive.iter().copied().filter(|i| report.active_set.contains(i)).collect();
    if chosen.len() != d {
        return Err(VarianceError::DegenerateActiveSet {
            tight: report.active_set.len(),
            positive: positive.len(),
            d,
        });
    }
    Ok(chosen)
}

/// Steady-state `Ā⁺` (rows: active indices, columns: θ coordinates) and
/// `β̄⁺` under the behavior policy's invariant pmf:
/// `Ā⁺[i][j] = E_ϖ[ (-ψ(Z) + γ Σ_{x'} P(x'|Z) ψ(x', φ*(x')))_j · ζ(Z)^{j_i} ]`.
pub fn exact_abar_plus(
    mdp: &FiniteMdp,
    features: &FeatureMap<usize>,
    policy: &RandomizedPolicy,
    theta_star: &[f64],
    active: &[usize],
) -> (DMatrix<f64>, DVector<f64>) {
    let varpi = joint_invariant_pmf(mdp, policy).expect("behavior chain must be uni-chain");
    let q = LinearQ::new(features, theta_star.to_vec());
    let gamma = mdp.discount();
    let d = features.d();
    let mut abar = DMatrix::zeros(active.len(), d);
    let mut betabar = DVector::zeros(active.len());
    for x in 0..mdp.n_states() {
        for u in 0..mdp.n_actions() {
            let w = varpi[mdp.z_index(x, u)];
            if w == 0.0 {
                continue;
            }
            let zeta = features.zeta(&x, u);
            let psi = features.psi(&x, u);
            let mut v: Vec<f64> = psi.iter().map(|p| -p).collect();
            for x2 in 0..mdp.n_states() {
                let p = mdp.transition_prob(x, u, x2);
                if p == 0.0 {
                    continue;
                }
                let (_, greedy) = q.underline_q(&x2);
                for (vj, pj) in v.iter_mut().zip(features.psi(&x2, greedy)) {
                    *vj += gamma * p * pj;
                }
            }
            for (row, ji) in active.iter().enumerate() {
                let wz = w * zeta[*ji];
                if wz == 0.0 {
                    continue;
                }
                for j in 0..d {
                    abar[(row, j)] += wz * v[j];
                }
                betabar[row] += wz * mdp.cost(x, u);
            }
        }
    }
    (abar, betabar)
}

/// Empirical counterparts of [`exact_abar_plus`] averaged along a trajectory.
pub fn empirical_abar_plus<S>(
    traj: &Trajectory<S>,
    features: &FeatureMap<S>,
    gamma: f64,
    theta_star: &[f64],
    active: &[usize],
) -> (DMatrix<f64>, DVector<f64>) {
    let q = LinearQ::new(features, theta_star.to_vec());
    let d = features.d();
    let n = traj.steps.len() as f64;
    let mut abar = DMatrix::zeros(active.len(), d);
    let mut betabar = DVector::zeros(active.len());
    for step in &traj.steps {
        let zeta = features.zeta(&step.state, step.action);
        let psi = features.psi(&step.state, step.action);
        let (_, greedy) = q.underline_q(&step.next_state);
        let next = features.psi(&step.next_state, greedy);
        for (row, ji) in active.iter().enumerate() {
            let wz = zeta[*ji] / n;
            if wz == 0.0 {
                continue;
            }
            for j in 0..d {
                abar[(row, j)] += wz * (-psi[j] + gamma * next[j]);
            }
            betabar[row] += wz * step.cost;
        }
    }
    (abar, betabar)
}

/// Disturbance sequence along a trajectory:
/// `W_k = (β⁺_k - β̄⁺) + (A⁺_k - Ā⁺)θ*`, one vector per step.  The per-step
/// part collapses to `ζ⁺_k · D_{k+1}(θ*)`, the active-row eligibilities times
/// the temporal difference at θ*.
pub fn build_w<S>(
    traj: &Trajectory<S>,
    features: &FeatureMap<S>,
    gamma: f64,
    theta_star: &[f64],
    active: &[usize],
    abar_plus: &DMatrix<f64>,
    betabar_plus: &DVector<f64>,
) -> Vec<Vec<f64>> {
    assert_eq!(abar_plus.nrows(), active.len());
    assert_eq!(betabar_plus.len(), active.len());
    let q = LinearQ::new(features, theta_star.to_vec());
    // steady-state mean of ζ⁺D(θ*): zero on rows whose constraint is tight
    let mean: DVector<f64> = betabar_plus + abar_plus * DVector::from_column_slice(theta_star);
    traj.steps
        .iter()
        .map(|step| {
            let zeta = features.zeta(&step.state, step.action);
            let td = crate::features::td_term(&q, step, gamma);
            active
                .iter()
                .enumerate()
                .map(|(row, ji)| zeta[*ji] * td - mean[row])
                .collect()
        })
        .collect()
}

/// `Σ_W ≈ N · cov(W̄_N)` from independent replicates of the N-step average.
pub fn sigma_w_from_replicates(wbars: &[Vec<f64>], n_per_replicate: usize) -> DMatrix<f64> {
    let cov = stats::sample_covariance(wbars);
    symmetrize(&(cov * n_per_replicate as f64))
}

/// Sandwich `Σ_θ = [Ā⁺]⁻¹ Σ_W [Ā⁺]⁻ᵀ` with a condition-number guard.
/// Returns the covariance and the condition number of Ā⁺.
pub fn sigma_theta(
    abar_plus: &DMatrix<f64>,
    sigma_w: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64), VarianceError> {
    let svd = abar_plus.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !condition.is_finite() || condition > ABAR_COND_CAP {
        return Err(VarianceError::SingularAbar { condition });
    }
    let inv = abar_plus
        .clone()
        .try_inverse()
        .ok_or(VarianceError::SingularAbar { condition })?;
    Ok((symmetrize(&(&inv * sigma_w * inv.transpose())), condition))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Everything the sandwich prediction needs, next to what the data shows.
pub struct CovarianceReport {
    pub active_indices: Vec<usize>,
    pub abar_plus: DMatrix<f64>,
    pub betabar_plus: DVector<f64>,
    pub abar_condition: f64,
    pub sigma_w: DMatrix<f64>,
    pub sigma_theta: DMatrix<f64>,
    /// `N · cov(θ_N - θ*)` over the replicates.
    pub empirical_cov: DMatrix<f64>,
    pub theta_star: Vec<f64>,
    pub n: usize,
    pub replicates: usize,
}

impl CovarianceReport {
    pub fn frobenius_gap(&self) -> f64 {
        stats::frobenius_relative_gap(&self.empirical_cov, &self.sigma_theta)
    }

    pub fn to_json(&self) -> String {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
        };
        serde_json::to_string_pretty(&serde_json::json!({
            "active_indices": self.active_indices,
            "abar_plus": rows(&self.abar_plus),
            "betabar_plus": self.betabar_plus.as_slice(),
            "abar_condition": self.abar_condition,
            "sigma_w": rows(&self.sigma_w),
            "sigma_theta": rows(&self.sigma_theta),
            "empirical_cov": rows(&self.empirical_cov),
            "theta_star": self.theta_star,
            "n": self.n,
            "replicates": self.replicates,
            "frobenius_gap": self.frobenius_gap(),
        }))
        .expect("report serialization cannot fail")
    }
}

/// Full pipeline on a finite model: exact program for θ* and the active set,
/// exact `Ā⁺`, then `replicates` sampled runs of length `n` (streams 1..=m of
/// `seed`) feeding both the disturbance covariance and the empirical error
/// covariance.
pub fn covariance_report(
    mdp: &FiniteMdp,
    features: &FeatureMap<usize>,
    policy: &RandomizedPolicy,
    mu_feature_mean: &[f64],
    n: usize,
    replicates: usize,
    seed: u64,
) -> Result<CovarianceReport, VarianceError> {
    assert!(replicates >= 2);
    let varpi = joint_invariant_pmf(mdp, policy).expect("behavior chain must be uni-chain");
    let exact =
        ConstraintSystem::exact_tabular(mdp, features, &varpi, mu_feature_mean.to_vec());
    let star_report = cvxq::solve_cvxq(&exact, exact.default_box_radius())
        .map_err(|_| VarianceError::SolveFailed { replicate: usize::MAX })?;
    let theta_star = star_report.theta.clone();
    let active = active_plus_indices(&star_report)?;
    let (abar, betabar) = exact_abar_plus(mdp, features, policy, &theta_star, &active);

    let gamma = mdp.discount();
    let runs = parallel::run_indexed(replicates, |r| {
        let env = MdpEnv::new(mdp);
        let traj = rollout_on_stream(&env, policy, n, seed, r as u64 + 1);
        let cs = ConstraintSystem::from_trajectory(&traj, features, gamma, mu_feature_mean.to_vec());
        let theta_n = cvxq::solve_cvxq(&cs, cs.default_box_radius()).map(|rep| rep.theta);
        let ws = build_w(&traj, features, gamma, &theta_star, &active, &abar, &betabar);
        (theta_n, stats::mean_vector(&ws))
    });

    let mut tilde_rows = Vec::with_capacity(replicates);
    let mut wbar_rows = Vec::with_capacity(replicates);
    for (r, (theta_n, wbar)) in runs.into_iter().enumerate() {
        let theta_n = theta_n.map_err(|_| VarianceError::SolveFailed { replicate: r })?;
        tilde_rows.push(theta_n.iter().zip(&theta_star).map(|(a, b)| a - b).collect());
        wbar_rows.push(wbar);
    }

    let sigma_w = sigma_w_from_replicates(&wbar_rows, n);
    let (sig_theta, condition) = sigma_theta(&abar, &sigma_w)?;
    let empirical = symmetrize(&(stats::sample_covariance(&tilde_rows) * n as f64));
    Ok(CovarianceReport {
        active_indices: active,
        abar_plus: abar,
        betabar_plus: betabar,
        abar_condition: condition,
        sigma_w,
        sigma_theta: sig_theta,
        empirical_cov: empirical,
        theta_star,
        n,
        replicates,
    })
}

/// `q(θ) = (quadᵀθ)² + linᵀθ + constant`, the constraint shape shared by the
/// laboratory's limit, sampled, and shifted programs.
#[derive(Debug, Clone, Copy)]
pub struct Quadratic {
    pub quad: [f64; 2],
    pub lin: [f64; 2],
    pub constant: f64,
}

impl Quadratic {
    pub fn value(&self, theta: [f64; 2]) -> f64 {
        let s = self.quad[0] * theta[0] + self.quad[1] * theta[1];
        s * s + self.lin[0] * theta[0] + self.lin[1] * theta[1] + self.constant
    }

    pub fn gradient(&self, theta: [f64; 2]) -> [f64; 2] {
        let s = self.quad[0] * theta[0] + self.quad[1] * theta[1];
        [2.0 * s * self.quad[0] + self.lin[0], 2.0 * s * self.quad[1] + self.lin[1]]
    }
}

/// Interior-point solution of a 2-D program with quadratic constraints.
#[derive(Debug, Clone)]
pub struct QpReport {
    pub theta: [f64; 2],
    pub objective: f64,
    pub duals: Vec<f64>,
    /// Indices with `|q_i(θ)|` within tolerance of zero.
    pub tight: Vec<usize>,
}

fn solve_2x2(h: [[f64; 2]; 2], rhs: [f64; 2]) -> Option<[f64; 2]> {
    let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
    if det.abs() < 1e-300 {
        return None;
    }
    Some([
        (rhs[0] * h[1][1] - rhs[1] * h[0][1]) / det,
        (rhs[1] * h[0][0] - rhs[0] * h[1][0]) / det,
    ])
}

fn strictly_feasible_start(quads: &[Quadratic]) -> Option<[f64; 2]> {
    let worst =
        |th: [f64; 2]| quads.iter().map(|q| q.value(th)).fold(f64::NEG_INFINITY, f64::max);
    let mut theta = [0.0, 0.0];
    let mut w = worst(theta);
    // descent on Σ [q_i + margin]_+² pushes strictly inside; the margin keeps
    // the found point away from the boundary so the barrier can start
    let margin = 1e-3;
    for _ in 0..500 {
        if w < -margin * 0.5 {
            return Some(theta);
        }
        let mut g = [0.0, 0.0];
        for q in quads {
            let excess = q.value(theta) + margin;
            if excess > 0.0 {
                let qg = q.gradient(theta);
                g[0] += 2.0 * excess * qg[0];
                g[1] += 2.0 * excess * qg[1];
            }
        }
        let gn = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if gn < 1e-14 {
            break;
        }
        let mut step = 1.0;
        let penalty = |th: [f64; 2]| {
            quads.iter().map(|q| (q.value(th) + margin).max(0.0).powi(2)).sum::<f64>()
        };
        let p0 = penalty(theta);
        loop {
            let cand = [theta[0] - step * g[0], theta[1] - step * g[1]];
            if penalty(cand) < p0 || step < 1e-12 {
                theta = cand;
                break;
            }
            step *= 0.5;
        }
        w = worst(theta);
    }
    if w < 0.0 {
        Some(theta)
    } else {
        None
    }
}

/// Damped-Newton log-barrier minimization of `objectiveᵀθ` over
/// `q_i(θ) ≤ 0`.  Errors when no strictly feasible point is found.
pub fn solve_qp2(quads: &[Quadratic], objective: [f64; 2]) -> Result<QpReport, VarianceError> {
    let mut theta = strictly_feasible_start(quads).ok_or(VarianceError::InfeasibleLab)?;
    let mut t = 1.0;
    let mut duals = vec![0.0; quads.len()];
    while t <= BARRIER_T_MAX {
        for _ in 0..100 {
            let mut grad = [t * objective[0], t * objective[1]];
            let mut hess = [[0.0f64; 2]; 2];
            for q in quads {
                let val = q.value(theta);
                let qg = q.gradient(theta);
                let inv = 1.0 / (-val);
                grad[0] += qg[0] * inv;
                grad[1] += qg[1] * inv;
                for a in 0..2 {
                    for b in 0..2 {
                        hess[a][b] += 2.0 * q.quad[a] * q.quad[b] * inv
                            + qg[a] * qg[b] * inv * inv;
                    }
                }
            }
            let dir = match solve_2x2(hess, [-grad[0], -grad[1]]) {
                Some(d) => d,
                None => break,
            };
            let decrement = -(grad[0] * dir[0] + grad[1] * dir[1]);
            if decrement * 0.5 <= NEWTON_TOL {
                break;
            }
            let barrier = |th: [f64; 2]| -> f64 {
                let mut f = t * (objective[0] * th[0] + objective[1] * th[1]);
                for q in quads {
                    let val = q.value(th);
                    if val >= 0.0 {
                        return f64::INFINITY;
                    }
                    f -= (-val).ln();
                }
                f
            };
            let f0 = barrier(theta);
            let mut step = 1.0;
            loop {
                let cand = [theta[0] + step * dir[0], theta[1] + step * dir[1]];
                if barrier(cand) <= f0 - 0.25 * step * decrement {
                    theta = cand;
                    break;
                }
                step *= 0.5;
                if step < 1e-14 {
                    break;
                }
            }
            if step < 1e-14 {
                break;
            }
        }
        for (l, q) in duals.iter_mut().zip(quads) {
            *l = 1.0 / (t * (-q.value(theta)));
        }
        t *= 2.0;
    }
    let tight = quads
        .iter()
        .enumerate()
        .filter(|(_, q)| q.value(theta).abs() <= 1e-5 * (1.0 + q.constant.abs()))
        .map(|(i, _)| i)
        .collect();
    Ok(QpReport {
        theta,
        objective: objective[0] * theta[0] + objective[1] * theta[1],
        duals,
        tight,
    })
}

/// Randomized quadratic program on the plane: minimize `objectiveᵀθ` subject
/// to `ḡ_N(θ) ≤ 0`, where `ḡ_N` averages `g(θ + Δ_k)` over i.i.d. Gaussian
/// perturbations and `g_i(θ) = (a_iᵀθ)² + b_iᵀθ - 1`.
#[derive(Debug, Clone)]
pub struct RandomConstraintLab {
    pub a: Vec<[f64; 2]>,
    pub b: Vec<[f64; 2]>,
    pub objective: [f64; 2],
    pub noise_scale: f64,
    pub n: usize,
    pub runs: usize,
    pub seed: u64,
}

impl RandomConstraintLab {
    /// Coefficients from stream 0 of `seed`; run r consumes stream r+1.
    /// `sigma_a` keeps `‖a_i‖² < 1` likely, so θ = 0 stays strictly feasible
    /// for the averaged constraints.
    pub fn sample(seed: u64, n_constraints: usize, sigma_a: f64, n: usize, runs: usize) -> Self {
        let mut rng = stream_rng(seed, 0);
        let mut draw = |scale: f64| -> [f64; 2] {
            let x: f64 = rng.sample(StandardNormal);
            let y: f64 = rng.sample(StandardNormal);
            [scale * x, scale * y]
        };
        let a: Vec<[f64; 2]> = (0..n_constraints).map(|_| draw(sigma_a)).collect();
        let b: Vec<[f64; 2]> = (0..n_constraints).map(|_| draw(1.0)).collect();
        let objective = draw(1.0);
        RandomConstraintLab { a, b, objective, noise_scale: 1.0, n, runs, seed }
    }

    /// `ḡ_i(θ) = E[g_i(θ + Δ)] = g_i(θ) + σ²‖a_i‖²`: the Gaussian average of
    /// a quadratic shifts only the constant.
    pub fn limit_quadratics(&self) -> Vec<Quadratic> {
        let s2 = self.noise_scale * self.noise_scale;
        self.a
            .iter()
            .zip(&self.b)
            .map(|(a, b)| Quadratic {
                quad: *a,
                lin: *b,
                constant: s2 * (a[0] * a[0] + a[1] * a[1]) - 1.0,
            })
            .collect()
    }

    /// Sampled-average constraints of one run, reduced to the sufficient
    /// statistics Δ̄ and per-row mean of `(a_iᵀΔ)²`.
    fn sampled_quadratics(&self, delta_bar: [f64; 2], m2: &[f64]) -> Vec<Quadratic> {
        self.a
            .iter()
            .zip(&self.b)
            .zip(m2)
            .map(|((a, b), m2i)| {
                let a_dbar = a[0] * delta_bar[0] + a[1] * delta_bar[1];
                Quadratic {
                    quad: *a,
                    lin: [b[0] + 2.0 * a_dbar * a[0], b[1] + 2.0 * a_dbar * a[1]],
                    constant: m2i + b[0] * delta_bar[0] + b[1] * delta_bar[1] - 1.0,
                }
            })
            .collect()
    }

    /// Closed-form covariance of `(g_i(θ* + Δ))_{i ∈ rows}` for Gaussian Δ:
    /// `cov_ij = 4 s_i s_j α_ij + 2α_ij² + 2σ²(s_i a_iᵀb_j + s_j a_jᵀb_i)
    ///  + σ² b_iᵀb_j` with `α_ij = σ² a_iᵀa_j`, `s_i = a_iᵀθ*`.
    pub fn sigma_g(&self, theta_star: [f64; 2], rows: &[usize]) -> DMatrix<f64> {
        let s2 = self.noise_scale * self.noise_scale;
        let mut out = DMatrix::zeros(rows.len(), rows.len());
        for (p, i) in rows.iter().enumerate() {
            for (q, j) in rows.iter().enumerate() {
                let (ai, aj) = (self.a[*i], self.a[*j]);
                let (bi, bj) = (self.b[*i], self.b[*j]);
                let alpha = s2 * (ai[0] * aj[0] + ai[1] * aj[1]);
                let si = ai[0] * theta_star[0] + ai[1] * theta_star[1];
                let sj = aj[0] * theta_star[0] + aj[1] * theta_star[1];
                out[(p, q)] = 4.0 * si * sj * alpha
                    + 2.0 * alpha * alpha
                    + 2.0 * s2 * (si * (ai[0] * bj[0] + ai[1] * bj[1]))
                    + 2.0 * s2 * (sj * (aj[0] * bi[0] + aj[1] * bi[1]))
                    + s2 * (bi[0] * bj[0] + bi[1] * bj[1]);
            }
        }
        out
    }
}

/// One laboratory run's three solutions (None where the program came back
/// infeasible and the run was skipped).
#[derive(Debug, Clone)]
pub struct LabRun {
    pub theta_n: Option<[f64; 2]>,
    /// Limit constraints shifted by `b*_N`.
    pub theta_shift_limit: Option<[f64; 2]>,
    /// Sampled constraints shifted by `b*_N`.
    pub theta_shift_sampled: Option<[f64; 2]>,
}

pub struct CltLabResult {
    pub theta_star: [f64; 2],
    pub tight: Vec<usize>,
    pub positive_duals: Vec<usize>,
    pub runs: Vec<LabRun>,
    pub infeasible_runs: Vec<usize>,
    /// `D⁻¹ Σ_g,A D⁻ᵀ` at θ*, the sandwich prediction for `N·cov(θ_N-θ*)`.
    pub sigma_pred: DMatrix<f64>,
    pub empirical_cov_theta_n: DMatrix<f64>,
    pub empirical_cov_shift_limit: DMatrix<f64>,
}

impl CltLabResult {
    pub fn prediction_gap(&self) -> f64 {
        stats::frobenius_relative_gap(&self.empirical_cov_theta_n, &self.sigma_pred)
    }
}

/// Runs the laboratory: solves the limit program once, then `runs` sampled
/// programs plus the two shifted variants per run, and aggregates the scaled
/// error covariances next to the closed-form prediction.
pub fn clt_lab_run(lab: &RandomConstraintLab) -> Result<CltLabResult, VarianceError> {
    assert!(lab.runs >= 2 && lab.n >= 1);
    let limit_q = lab.limit_quadratics();
    let star = solve_qp2(&limit_q, lab.objective)?;
    let theta_star = star.theta;

    let dual_max = star.duals.iter().fold(0.0f64, |a, l| a.max(*l));
    let positive_duals: Vec<usize> = star
        .duals
        .iter()
        .enumerate()
        .filter(|(_, l)| **l > 1e-4 * dual_max.max(1.0))
        .map(|(i, _)| i)
        .collect();
    let tight = star.tight.clone();
    if tight.len() != 2 || positive_duals != tight {
        return Err(VarianceError::DegenerateActiveSet {
            tight: tight.len(),
            positive: positive_duals.len(),
            d: 2,
        });
    }

    // D rows: gradients of the active averaged constraints at θ*
    let g0 = limit_q[tight[0]].gradient(theta_star);
    let g1 = limit_q[tight[1]].gradient(theta_star);
    let d_mat = DMatrix::from_row_slice(2, 2, &[g0[0], g0[1], g1[0], g1[1]]);
    let sig_g = lab.sigma_g(theta_star, &tight);
    let (sigma_pred, _) = sigma_theta(&d_mat, &sig_g)?;

    let gbar_star: Vec<f64> = limit_q.iter().map(|q| q.value(theta_star)).collect();
    let runs = parallel::run_indexed(lab.runs, |r| {
        let mut rng = stream_rng(lab.seed, r as u64 + 1);
        let mut delta_bar = [0.0f64; 2];
        let mut m2 = vec![0.0f64; lab.a.len()];
        for _ in 0..lab.n {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            let d = [lab.noise_scale * dx, lab.noise_scale * dy];
            delta_bar[0] += d[0];
            delta_bar[1] += d[1];
            for (m, a) in m2.iter_mut().zip(&lab.a) {
                let ad = a[0] * d[0] + a[1] * d[1];
                *m += ad * ad;
            }
        }
        let nf = lab.n as f64;
        delta_bar[0] /= nf;
        delta_bar[1] /= nf;
        for m in &mut m2 {
            *m /= nf;
        }

        let sampled = lab.sampled_quadratics(delta_bar, &m2);
        // b*_N[i] = ḡ_i(θ*) - ḡ_N,i(θ*)
        let b_star: Vec<f64> =
            gbar_star.iter().zip(&sampled).map(|(g, q)| g - q.value(theta_star)).collect();
        let shift = |qs: &[Quadratic]| -> Vec<Quadratic> {
            qs.iter()
                .zip(&b_star)
                .map(|(q, bs)| Quadratic { constant: q.constant - bs, ..*q })
                .collect()
        };
        LabRun {
            theta_n: solve_qp2(&sampled, lab.objective).ok().map(|r| r.theta),
            theta_shift_limit: solve_qp2(&shift(&limit_q), lab.objective).ok().map(|r| r.theta),
            theta_shift_sampled: solve_qp2(&shift(&sampled), lab.objective).ok().map(|r| r.theta),
        }
    });

    let infeasible_runs: Vec<usize> = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            r.theta_n.is_none() || r.theta_shift_limit.is_none() || r.theta_shift_sampled.is_none()
        })
        .map(|(i, _)| i)
        .collect();

    let scaled_rows = |pick: &dyn Fn(&LabRun) -> Option<[f64; 2]>| -> Vec<Vec<f64>> {
        runs.iter()
            .filter_map(|r| pick(r))
            .map(|th| vec![th[0] - theta_star[0], th[1] - theta_star[1]])
            .collect()
    };
    let cov = |rows: &[Vec<f64>]| -> DMatrix<f64> {
        assert!(rows.len() >= 2, "not enough feasible runs to form a covariance");
        symmetrize(&(stats::sample_covariance(rows) * lab.n as f64))
    };
    let empirical_cov_theta_n = cov(&scaled_rows(&|r| r.theta_n));
    let empirical_cov_shift_limit = cov(&scaled_rows(&|r| r.theta_shift_limit));

    Ok(CltLabResult {
        theta_star,
        tight,
        positive_duals,
        runs,
        infeasible_runs,
        sigma_pred,
        empirical_cov_theta_n,
        empirical_cov_shift_limit,
    })
}

/// Equal-width histogram over the sample range.
pub fn histogram(xs: &[f64], n_bins: usize) -> (Vec<f64>, Vec<usize>) {
    assert!(!xs.is_empty() && n_bins >= 1);
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / n_bins as f64).max(f64::MIN_POSITIVE);
    let edges: Vec<f64> = (0..=n_bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0usize; n_bins];
    for x in xs {
        let idx = (((x - lo) / width) as usize).min(n_bins - 1);
        counts[idx] += 1;
    }
    (edges, counts)
}

/// One row per run: `run,theta_n_0,theta_n_1,shift_limit_0,shift_limit_1,`
/// `shift_sampled_0,shift_sampled_1`, empty fields for skipped programs.
pub fn write_lab_runs_csv<W: std::io::Write>(
    out: &mut W,
    result: &CltLabResult,
) -> std::io::Result<()> {
    writeln!(
        out,
        "run,theta_n_0,theta_n_1,shift_limit_0,shift_limit_1,shift_sampled_0,shift_sampled_1"
    )?;
    let field = |v: Option<[f64; 2]>, i: usize| match v {
        Some(th) => format!("{:.17e}", th[i]),
        None => String::new(),
    };
    for (r, run) in result.runs.iter().enumerate() {
        writeln!(
            out,
            "{r},{},{},{},{},{},{}",
            field(run.theta_n, 0),
            field(run.theta_n, 1),
            field(run.theta_shift_limit, 0),
            field(run.theta_shift_limit, 1),
            field(run.theta_shift_sampled, 0),
            field(run.theta_shift_sampled, 1),
        )?;
    }
    Ok(())
}

/// One row per bin: `edge_lo,edge_hi,count`.
pub fn write_histogram_csv<W: std::io::Write>(
    out: &mut W,
    edges: &[f64],
    counts: &[usize],
) -> std::io::Result<()> {
    assert_eq!(edges.len(), counts.len() + 1);
    writeln!(out, "edge_lo,edge_hi,count")?;
    for (i, c) in counts.iter().enumerate() {
        writeln!(out, "{:.17e},{:.17e},{c}", edges[i], edges[i + 1])?;
    }
    Ok(())
}

/// Mean-square error of the sampled program against θ* across data sizes,
/// with the log-log slope (the CLT predicts -1).
pub struct MseSlope {
    pub ns: Vec<usize>,
    pub mse: Vec<f64>,
    pub slope: f64,
}

pub fn cvxq_mse_slope(
    mdp: &FiniteMdp,
    features: &FeatureMap<usize>,
    policy: &RandomizedPolicy,
    mu_feature_mean: &[f64],
    theta_star: &[f64],
    ns: &[usize],
    replicates: usize,
    seed: u64,
) -> MseSlope {
    assert!(ns.len() >= 2);
    let gamma = mdp.discount();
    let mse: Vec<f64> = ns
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let errs = parallel::run_indexed(replicates, |r| {
                let env = MdpEnv::new(mdp);
                let stream = (i * replicates + r) as u64 + 1;
                let traj = rollout_on_stream(&env, policy, *n, seed, stream);
                let cs = ConstraintSystem::from_trajectory(
                    &traj,
                    features,
                    gamma,
                    mu_feature_mean.to_vec(),
                );
                let rep = cvxq::solve_cvxq(&cs, cs.default_box_radius())
                    .expect("origin keeps the sampled program feasible");
                rep.theta
                    .iter()
                    .zip(theta_star)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            });
            stats::mean(&errs)
        })
        .collect();
    let xs: Vec<f64> = ns.iter().map(|n| *n as f64).collect();
    let slope = stats::log_log_slope(&xs, &mse);
    MseSlope { ns: ns.to_vec(), mse, slope }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvxq::uniform_mu_feature_mean;
    use crate::features::tabular_basis;
    use crate::mdp::chain_walk;
    use crate::simulate::rollout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (FiniteMdp, RandomizedPolicy) {
        (chain_walk(3, 0.5), RandomizedPolicy::uniform(3, 2))
    }

    fn star_and_active(
        mdp: &FiniteMdp,
        features: &FeatureMap<usize>,
        policy: &RandomizedPolicy,
    ) -> (Vec<f64>, Vec<usize>) {
        let varpi = joint_invariant_pmf(mdp, policy).unwrap();
        let mu = uniform_mu_feature_mean(features, mdp.n_states());
        let exact = ConstraintSystem::exact_tabular(mdp, features, &varpi, mu);
        let report = cvxq::solve_cvxq(&exact, exact.default_box_radius()).unwrap();
        let active = active_plus_indices(&report).unwrap();
        (report.theta, active)
    }

    #[test]
    fn tabular_fixture_activates_every_constraint() {
        let (mdp, policy) = fixture();
        let features = tabular_basis(&mdp);
        let (_, active) = star_and_active(&mdp, &features, &policy);
        assert_eq!(active, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn w_sequence_has_zero_steady_state_mean() {
        let (mdp, policy) = fixture();
        let features = tabular_basis(&mdp);
        let (theta_star, active) = star_and_active(&mdp, &features, &policy);
        let (abar, betabar) = exact_abar_plus(&mdp, &features, &policy, &theta_star, &active);
        let env = MdpEnv::new(&mdp);
        let traj = rollout(&env, &policy, 1_000_000, 31);
        let ws = build_w(&traj, &features, 0.5, &theta_star, &active, &abar, &betabar);
        // serially correlated stream: standard error from batch means
        let n_batches = 100;
        let batch = ws.len() / n_batches;
        for coord in 0..active.len() {
            let means: Vec<f64> = (0..n_batches)
                .map(|b| {
                    ws[b * batch..(b + 1) * batch].iter().map(|w| w[coord]).sum::<f64>()
                        / batch as f64
                })
                .collect();
            let grand = stats::mean(&means);
            let se = (stats::sample_variance(&means) / n_batches as f64).sqrt();
            assert!(
                grand.abs() <= 3.0 * se + 1e-12,
                "coord {coord}: mean {grand} exceeds 3x standard error {se}"
            );
        }
    }

    #[test]
    fn zero_discount_reduces_w_to_outer_products() {
        let (mdp, policy) = fixture();
        let features = tabular_basis(&mdp);
        let env = MdpEnv::new(&mdp);
        let traj = rollout(&env, &policy, 200, 5);
        let theta: Vec<f64> = (0..6).map(|i| 0.2 * i as f64 - 0.5).collect();
        let active: Vec<usize> = (0..6).collect();
        let abar = DMatrix::zeros(6, 6);
        let betabar = DVector::zeros(6);
        let ws = build_w(&traj, &features, 0.0, &theta, &active, &abar, &betabar);
        for (w, step) in ws.iter().zip(&traj.steps) {
            let zeta = features.zeta(&step.state, step.action);
            let psi = features.psi(&step.state, step.action);
            for i in 0..6 {
                // A⁺ rows are outer products of -ψ with ζ components at γ=0
                let a_theta: f64 = (0..6).map(|j| -psi[j] * zeta[i] * theta[j]).sum();
                let direct = step.cost * zeta[i] + a_theta;
                assert!((w[i] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_and_empirical_abar_agree() {
        let (mdp, policy) = fixture();
        let features = tabular_basis(&mdp);
        let (theta_star, active) = star_and_active(&mdp, &features, &policy);
        let (abar, betabar) = exact_abar_plus(&mdp, &features, &policy, &theta_star, &active);
        let env = MdpEnv::new(&mdp);
        let traj = rollout(&env, &policy, 1_000_000, 77);
        // batch means give the standard error of each averaged entry
        let n_batches = 100;
        let batch = traj.steps.len() / n_batches;
        let mut entry_means: Vec<Vec<f64>> = Vec::with_capacity(n_batches);
        for bidx in 0..n_batches {
            let sub = Trajectory {
                steps: traj.steps[bidx * batch..(bidx + 1) * batch].to_vec(),
                seed: traj.seed,
            };
            let (a_b, b_b) = empirical_abar_plus(&sub, &features, 0.5, &theta_star, &active);
            let mut flat: Vec<f64> = a_b.iter().cloned().collect();
            flat.extend(b_b.iter().cloned());
            entry_means.push(flat);
        }
        let mut target: Vec<f64> = abar.iter().cloned().collect();
        target.extend(betabar.iter().cloned());
        let grand = stats::mean_vector(&entry_means);
        let mut gap2 = 0.0;
        let mut se2 = 0.0;
        for j in 0..target.len() {
            let col: Vec<f64> = entry_means.iter().map(|r| r[j]).collect();
            gap2 += (grand[j] - target[j]).powi(2);
            se2 += stats::sample_variance(&col) / n_batches as f64;
        }
        assert!(
            gap2.sqrt() <= 3.0 * se2.sqrt(),
            "Frobenius gap {} vs 3x standard error {}",
            gap2.sqrt(),
            3.0 * se2.sqrt()
        );
    }

    #[test]
    fn synthetic_iid_stream_recovers_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 3;
        let n = 10_000;
        let m = 200;
        let mut wbars = Vec::with_capacity(m);
        for _ in 0..m {
            let mut acc = vec![0.0; d];
            for _ in 0..n {
                for a in acc.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *a += z;
                }
            }
            for a in acc.iter_mut() {
                *a /= n as f64;
            }
            wbars.push(acc);
        }
        let sigma = sigma_w_from_replicates(&wbars, n);
        let eye = DMatrix::identity(d, d);
        // sample-covariance noise alone contributes ~sqrt(12/m)/sqrt(3) ≈ 0.14
        let gap = stats::frobenius_relative_gap(&sigma, &eye);
        assert!(gap <= 0.25, "relative Frobenius gap {gap}");
    }

    #[test]
    fn identity_sandwich_returns_sigma_w() {
        let sigma_w = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
        let (sigma, cond) = sigma_theta(&DMatrix::identity(2, 2), &sigma_w).unwrap();
        assert!((sigma - sigma_w).norm() < 1e-14);
        assert!((cond - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sandwich_formula_inverts_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let d = 4;
            let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0))
                + DMatrix::identity(d, d) * 3.0;
            let s_half = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            let sigma_w = &s_half * s_half.transpose() + DMatrix::identity(d, d) * 0.1;
            let (sigma, _) = sigma_theta(&a, &sigma_w).unwrap();
            let back = &a * sigma * a.transpose();
            assert!((back - &sigma_w).norm() < 1e-10 * sigma_w.norm());
        }
    }

    #[test]
    fn singular_abar_is_reported() {
        let mut a = DMatrix::identity(3, 3);
        a[(2, 2)] = 1e-14;
        match sigma_theta(&a, &DMatrix::identity(3, 3)) {
            Err(VarianceError::SingularAbar { condition }) => assert!(condition > ABAR_COND_CAP),
            other => panic!("expected SingularAbar, got {other:?}"),
        }
    }

    #[test]
    fn mdp_replicates_match_the_sandwich_prediction() {
        let (mdp, policy) = fixture();
        let features = tabular_basis(&mdp);
        let mu = uniform_mu_feature_mean(&features, 3);
        let report =
            covariance_report(&mdp, &features, &policy, &mu, 10_000, 100, 0x51_6D_A0).unwrap();
        assert_eq!(report.active_indices.len(), 6);
        assert!(report.abar_condition < 1e3);
        for i in 0..6 {
            assert!(report.sigma_theta[(i, i)] >= -1e-8);
        }
        let gap = report.frobenius_gap();
        assert!(gap <= 0.25, "Frobenius relative gap {gap}");
    }

    fn pinned_lab(n: usize, runs: usize) -> RandomConstraintLab {
        RandomConstraintLab::sample(LAB_SEED, 10, 0.3, n, runs)
    }

    #[test]
    fn lab_limit_program_has_matching_tight_and_dual_sets() {
        let lab = pinned_lab(100, 2);
        let result = clt_lab_run(&lab).unwrap();
        assert_eq!(result.tight.len(), 2);
        assert_eq!(result.tight, result.positive_duals);
    }

    #[test]
    fn lab_zero_noise_collapses_all_three_programs() {
        let mut lab = pinned_lab(50, 3);
        lab.noise_scale = 0.0;
        let result = clt_lab_run(&lab).unwrap();
        for run in &result.runs {
            for th in [run.theta_n, run.theta_shift_limit, run.theta_shift_sampled] {
                let th = th.expect("zero-noise programs stay feasible");
                let gap = ((th[0] - result.theta_star[0]).powi(2)
                    + (th[1] - result.theta_star[1]).powi(2))
                .sqrt();
                assert!(gap <= 1e-8, "zero-noise solution strayed {gap}");
            }
        }
    }

    #[test]
    fn lab_sampled_and_shifted_covariances_agree() {
        let lab = pinned_lab(10_000, 100);
        let result = clt_lab_run(&lab).unwrap();
        assert!(result.infeasible_runs.is_empty());
        let gap = stats::frobenius_relative_gap(
            &result.empirical_cov_shift_limit,
            &result.empirical_cov_theta_n,
        );
        assert!(gap <= 0.20, "covariance gap between program variants {gap}");
    }

    #[test]
    fn lab_prediction_matches_empirical_covariance() {
        let lab = pinned_lab(10_000, 100);
        let result = clt_lab_run(&lab).unwrap();
        let gap = result.prediction_gap();
        assert!(gap <= 0.20, "prediction gap {gap}");
    }

    #[test]
    fn qp_solver_certifies_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut solved = 0;
        for _ in 0..40 {
            let quads: Vec<Quadratic> = (0..6)
                .map(|_| Quadratic {
                    quad: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
                    lin: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                    constant: -rng.gen_range(0.2..1.0),
                })
                .collect();
            let c = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            // box rows keep every instance bounded
            let mut all = quads.clone();
            for (qx, qy, cc) in
                [(1.0, 0.0, -10.0), (-1.0, 0.0, -10.0), (0.0, 1.0, -10.0), (0.0, -1.0, -10.0)]
            {
                all.push(Quadratic { quad: [0.0, 0.0], lin: [qx, qy], constant: cc });
            }
            let report = match solve_qp2(&all, c) {
                Ok(r) => r,
                Err(_) => continue,
            };
            solved += 1;
            let mut station = [c[0], c[1]];
            for (l, q) in report.duals.iter().zip(&all) {
                assert!(*l >= 0.0);
                let g = q.gradient(report.theta);
                station[0] += l * g[0];
                station[1] += l * g[1];
                let val = q.value(report.theta);
                assert!(val <= 1e-9, "infeasible at optimum: {val}");
                assert!(l * (-val) <= 1e-5, "complementarity violated");
            }
            let sn = (station[0] * station[0] + station[1] * station[1]).sqrt();
            assert!(sn <= 1e-5, "stationarity residual {sn}");
        }
        assert!(solved >= 30, "only {solved} instances solved");
    }

    #[test]
    fn histogram_bins_cover_all_samples() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.7).sin()).collect();
        let (edges, counts) = histogram(&xs, 24);
        assert_eq!(edges.len(), 25);
        assert_eq!(counts.iter().sum::<usize>(), xs.len());
    }

    #[test]
    fn mse_decays_at_the_clt_rate() {
        let (mdp, policy) = fixture();
        let features = tabular_basis(&mdp);
        let mu = uniform_mu_feature_mean(&features, 3);
        let (theta_star, _) = star_and_active(&mdp, &features, &policy);
        let res = cvxq_mse_slope(
            &mdp,
            &features,
            &policy,
            &mu,
            &theta_star,
            &[1_000, 10_000],
            30,
            0xC0FFEE,
        );
        assert!(
            (res.slope + 1.0).abs() <= 0.3,
            "log-log slope {} off the CLT rate",
            res.slope
        );
    }
}

/// Coefficient seed for the pinned laboratory instance used by tests and the
/// bundled configs: the limit program is strictly feasible at the origin,
/// bounded, and has exactly two tight constraints carrying positive duals.
pub const LAB_SEED: u64 = 0;

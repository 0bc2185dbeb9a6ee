//! Watkins Q-learning with linear function approximation, plus the relative
//! variant that recenters the temporal difference.  These serve as the
//! stochastic-approximation baselines against the LP solvers: same data,
//! same function class, incremental updates instead of a program solve.

use std::io::Write as _;
use std::path::Path;

use crate::features::{relative_td_term, td_term, FeatureMap, LinearQ};
use crate::simulate::{Step, Trajectory};

/// Default norm guard; linear-FA Q-learning can genuinely diverge.
pub const DIVERGENCE_GUARD: f64 = 1e8;

#[derive(Debug, Clone, Copy)]
pub enum StepSizeRule {
    Constant(f64),
    /// `α_k = 1 / k^exponent` with 1-based k.
    Polynomial { exponent: f64 },
    /// `α_k = a / (1 + ‖ζ_k‖²)`: the per-step gain stays below `a` no matter
    /// how large the eligibility vector grows, so unbounded bases (ramps,
    /// raw state coordinates) cannot blow the recursion up on excursions.
    NormalizedConstant(f64),
}

impl StepSizeRule {
    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha_for(k, 0.0)
    }

    /// Step size given the squared norm of the step's eligibility vector;
    /// only [`StepSizeRule::NormalizedConstant`] reads it.
    pub fn alpha_for(&self, k: usize, zeta_norm2: f64) -> f64 {
        debug_assert!(k >= 1);
        match self {
            StepSizeRule::Constant(a) => *a,
            StepSizeRule::Polynomial { exponent } => (k as f64).powf(-exponent),
            StepSizeRule::NormalizedConstant(a) => a / (1.0 + zeta_norm2),
        }
    }

    fn validate(&self) {
        match self {
            StepSizeRule::Constant(a) | StepSizeRule::NormalizedConstant(a) => {
                assert!(*a > 0.0, "step size must be positive")
            }
            StepSizeRule::Polynomial { exponent } => {
                assert!(*exponent > 0.0 && *exponent <= 1.0, "exponent must lie in (0, 1]")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct QLearnConfig {
    pub step_rule: StepSizeRule,
    /// None starts from the origin.
    pub theta0: Option<Vec<f64>>,
    pub guard: f64,
    /// Record θ every this many steps (the final θ is always recorded).
    pub trace_stride: usize,
}

impl Default for QLearnConfig {
    fn default() -> Self {
        QLearnConfig {
            step_rule: StepSizeRule::Constant(1e-3),
            theta0: None,
            guard: DIVERGENCE_GUARD,
            trace_stride: 1000,
        }
    }
}

#[derive(Debug)]
pub enum QlearnError {
    DivergenceDetected { step: usize, norm: f64 },
}

impl std::fmt::Display for QlearnError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QlearnError::DivergenceDetected { step, norm } => {
                write!(f, "parameter norm {norm:.3e} exceeded the guard at step {step}")
            }
        }
    }
}

impl std::error::Error for QlearnError {}

#[derive(Debug, Clone)]
pub struct QLearnTrace {
    /// (step index, θ) snapshots at the configured stride plus the final θ.
    pub snapshots: Vec<(usize, Vec<f64>)>,
    pub final_theta: Vec<f64>,
    pub n_steps: usize,
}

/// `θ_{k+1} = θ_k + α_{k+1} D_{k+1}(θ_k) ζ_k` with `ζ_k = ψ_k`.
pub fn q_learning_run<S>(
    traj: &Trajectory<S>,
    features: &FeatureMap<S>,
    gamma: f64,
    config: &QLearnConfig,
) -> Result<QLearnTrace, QlearnError> {
    run_impl(traj, features, gamma, config, |q, step| td_term(q, step, gamma), |f, s| {
        f.psi(&s.state, s.action)
    })
}

/// Same recursion with a caller-supplied eligibility vector in place of ψ_k.
pub fn q_learning_run_with_eligibility<S>(
    traj: &Trajectory<S>,
    features: &FeatureMap<S>,
    gamma: f64,
    config: &QLearnConfig,
    eligibility: impl Fn(&FeatureMap<S>, &Step<S>) -> Vec<f64>,
) -> Result<QLearnTrace, QlearnError> {
    run_impl(traj, features, gamma, config, |q, step| td_term(q, step, gamma), eligibility)
}

/// Relative recursion: the temporal difference is shifted by `-δ θ'ω̄`,
/// which steers θ toward a recentred fixed point with the same greedy
/// policy.  `delta = 0` reproduces [`q_learning_run`] exactly.
pub fn relative_q_learning_run<S>(
    traj: &Trajectory<S>,
    features: &FeatureMap<S>,
    gamma: f64,
    config: &QLearnConfig,
    delta: f64,
    omega_feature_mean: &[f64],
) -> Result<QLearnTrace, QlearnError> {
    assert!(delta >= 0.0);
    assert_eq!(omega_feature_mean.len(), features.d());
    run_impl(
        traj,
        features,
        gamma,
        config,
        |q, step| relative_td_term(q, step, gamma, omega_feature_mean, delta),
        |f, s| f.psi(&s.state, s.action),
    )
}

fn run_impl<S>(
    traj: &Trajectory<S>,
    features: &FeatureMap<S>,
    gamma: f64,
    config: &QLearnConfig,
    td: impl Fn(&LinearQ<'_, S>, &Step<S>) -> f64,
    eligibility: impl Fn(&FeatureMap<S>, &Step<S>) -> Vec<f64>,
) -> Result<QLearnTrace, QlearnError> {
    assert!(gamma > 0.0 && gamma < 1.0);
    assert!(config.guard > 0.0);
    assert!(config.trace_stride >= 1);
    config.step_rule.validate();
    let d = features.d();
    let theta0 = config.theta0.clone().unwrap_or_else(|| vec![0.0; d]);
    assert_eq!(theta0.len(), d);

    let mut q = LinearQ::new(features, theta0);
    let mut snapshots = vec![(0, q.theta.clone())];
    for (k, step) in traj.steps.iter().enumerate() {
        let dk = td(&q, step);
        let zeta = eligibility(features, step);
        debug_assert_eq!(zeta.len(), d);
        let zeta_norm2 = zeta.iter().map(|z| z * z).sum::<f64>();
        let alpha = config.step_rule.alpha_for(k + 1, zeta_norm2);
        for (t, z) in q.theta.iter_mut().zip(&zeta) {
            *t += alpha * dk * z;
        }
        let norm = q.theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > config.guard {
            return Err(QlearnError::DivergenceDetected { step: k + 1, norm });
        }
        if (k + 1) % config.trace_stride == 0 {
            snapshots.push((k + 1, q.theta.clone()));
        }
    }
    let n = traj.steps.len();
    if snapshots.last().map(|(k, _)| *k) != Some(n) {
        snapshots.push((n, q.theta.clone()));
    }
    Ok(QLearnTrace { snapshots, final_theta: q.theta, n_steps: n })
}

/// Empirical projected-Bellman residual `(1/N) Σ_k D_{k+1}(θ) ψ_k` together
/// with the per-component standard error of that mean.  At a convergent
/// limit of the recursion the residual vanishes in probability.
pub fn galerkin_residual<S>(
    traj: &Trajectory<S>,
    features: &FeatureMap<S>,
    gamma: f64,
    theta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d = features.d();
    let n = traj.steps.len();
    assert!(n >= 2);
    let q = LinearQ::new(features, theta.to_vec());
    let mut mean = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for step in &traj.steps {
        let dk = td_term(&q, step, gamma);
        let psi = features.psi(&step.state, step.action);
        for ((m, s), p) in mean.iter_mut().zip(sq.iter_mut()).zip(&psi) {
            let v = dk * p;
            *m += v;
            *s += v * v;
        }
    }
    let nf = n as f64;
    let mut se = vec![0.0; d];
    for j in 0..d {
        mean[j] /= nf;
        let var = (sq[j] / nf - mean[j] * mean[j]).max(0.0) / (nf - 1.0) * nf;
        se[j] = (var / nf).sqrt();
    }
    (mean, se)
}

/// `(1/N) Σ_k ψ_k`, the trajectory's own feature occupation; the default
/// recentring pmf for the relative variants.
pub fn omega_feature_mean_from_trajectory<S>(
    traj: &Trajectory<S>,
    features: &FeatureMap<S>,
) -> Vec<f64> {
    let mut m = vec![0.0; features.d()];
    let w = 1.0 / traj.steps.len() as f64;
    for step in &traj.steps {
        for (mi, p) in m.iter_mut().zip(features.psi(&step.state, step.action)) {
            *mi += w * p;
        }
    }
    m
}

/// One snapshot per line: `step,theta_0,...,theta_{d-1}`.
pub fn write_trace_csv(path: &Path, trace: &QLearnTrace) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = trace.final_theta.len();
    write!(f, "step")?;
    for j in 0..d {
        write!(f, ",theta_{j}")?;
    }
    writeln!(f)?;
    for (k, theta) in &trace.snapshots {
        write!(f, "{k}")?;
        for t in theta {
            write!(f, ",{t:.17e}")?;
        }
        writeln!(f)?;
    }
    f.flush()
}

/// Squared distance between final parameters, used by variance comparisons.
pub fn theta_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::tabular_basis;
    use crate::mdp::{
        chain_walk, greedy_policy, value_iteration, FiniteMdp, RandomizedPolicy,
    };
    use crate::simulate::{rollout, MdpEnv};
    use nalgebra::DMatrix;

    fn training_data(n_states: usize, n: usize, seed: u64) -> (FiniteMdp, Trajectory<usize>) {
        let mdp = chain_walk(n_states, 0.9);
        let env = MdpEnv::new(&mdp);
        let behavior = RandomizedPolicy::uniform(n_states, 2);
        let traj = rollout(&env, &behavior, n, seed);
        (mdp, traj)
    }

    #[test]
    fn zero_cost_zero_start_stays_at_zero() {
        let mdp = chain_walk(3, 0.9);
        let zero = FiniteMdp::new(
            (0..2).map(|u| mdp.transition(u).clone()).collect(),
            DMatrix::zeros(3, 2),
            0.9,
        )
        .unwrap();
        let env = MdpEnv::new(&zero);
        let traj = rollout(&env, &RandomizedPolicy::uniform(3, 2), 500, 7);
        let features = tabular_basis(&zero);
        let trace =
            q_learning_run(&traj, &features, 0.9, &QLearnConfig::default()).unwrap();
        assert!(trace.final_theta.iter().all(|t| *t == 0.0));
    }

    // Polynomial steps on the global clock contract each pair's error like
    // exp(-(1-γ) Σ α over its visits); the discount here is chosen so that
    // horizon reaches the stated tolerance in test time.
    fn convergent_run(n_steps: usize, seed: u64) -> (FiniteMdp, Trajectory<usize>, QLearnTrace) {
        let mdp = chain_walk(3, 0.5);
        let env = MdpEnv::new(&mdp);
        let traj = rollout(&env, &RandomizedPolicy::uniform(3, 2), n_steps, seed);
        let features = tabular_basis(&mdp);
        let config = QLearnConfig {
            step_rule: StepSizeRule::Polynomial { exponent: 0.85 },
            ..QLearnConfig::default()
        };
        let trace = q_learning_run(&traj, &features, 0.5, &config).unwrap();
        (mdp, traj, trace)
    }

    #[test]
    fn tabular_diminishing_steps_reach_q_star() {
        let (mdp, _, trace) = convergent_run(8_000_000, 21);
        let q_star = value_iteration(&mdp, 1e-12);
        let mut sup = 0.0f64;
        let mut q = DMatrix::zeros(3, 2);
        for x in 0..3 {
            for u in 0..2 {
                q[(x, u)] = trace.final_theta[x * 2 + u];
                sup = sup.max((q[(x, u)] - q_star[(x, u)]).abs());
            }
        }
        assert!(sup < 5e-2, "sup error {sup}");
        assert!(crate::mdp::bellman_residual(&mdp, &q) <= 1e-2);
    }

    #[test]
    fn galerkin_residual_vanishes_at_the_limit() {
        let (mdp, traj, trace) = convergent_run(2_000_000, 22);
        let features = tabular_basis(&mdp);
        // at the exact limit the summands are martingale differences, so the
        // empirical mean obeys the 3-standard-error bound of the CLT
        let q_star = value_iteration(&mdp, 1e-12);
        let theta_star: Vec<f64> =
            (0..3).flat_map(|x| [q_star[(x, 0)], q_star[(x, 1)]]).collect();
        let (mean, se) = galerkin_residual(&traj, &features, 0.5, &theta_star);
        for (j, (m, s)) in mean.iter().zip(&se).enumerate() {
            assert!(m.abs() <= 3.0 * s, "component {j}: residual {m}, se {s}");
        }
        // the trained parameters carry O(sqrt(α_N)) iterate noise on top, so
        // their residual only admits an absolute bound
        let (mean_hat, _) = galerkin_residual(&traj, &features, 0.5, &trace.final_theta);
        for m in &mean_hat {
            assert!(m.abs() <= 2e-2, "trained residual {m}");
        }
    }

    #[test]
    fn delta_zero_reproduces_the_plain_trace() {
        let (mdp, traj) = training_data(4, 5_000, 3);
        let features = tabular_basis(&mdp);
        let config = QLearnConfig::default();
        let omega = omega_feature_mean_from_trajectory(&traj, &features);
        let plain = q_learning_run(&traj, &features, 0.9, &config).unwrap();
        let rel =
            relative_q_learning_run(&traj, &features, 0.9, &config, 0.0, &omega).unwrap();
        assert_eq!(plain.snapshots.len(), rel.snapshots.len());
        for ((ka, ta), (kb, tb)) in plain.snapshots.iter().zip(&rel.snapshots) {
            assert_eq!(ka, kb);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn relative_limit_has_the_optimal_greedy_policy() {
        let mdp = chain_walk(3, 0.5);
        let env = MdpEnv::new(&mdp);
        let traj = rollout(&env, &RandomizedPolicy::uniform(3, 2), 1_000_000, 23);
        let features = tabular_basis(&mdp);
        let config = QLearnConfig {
            step_rule: StepSizeRule::Polynomial { exponent: 0.85 },
            ..QLearnConfig::default()
        };
        let omega = omega_feature_mean_from_trajectory(&traj, &features);
        let trace =
            relative_q_learning_run(&traj, &features, 0.5, &config, 0.5, &omega).unwrap();
        let phi_star = greedy_policy(&value_iteration(&mdp, 1e-12));
        let q = LinearQ::new(&features, trace.final_theta.clone());
        for x in 0..3 {
            assert_eq!(q.underline_q(&x).1, phi_star.action(x), "state {x}");
        }
    }

    #[test]
    fn one_step_update_is_linear_in_alpha() {
        let (mdp, traj) = training_data(3, 1, 5);
        let features = tabular_basis(&mdp);
        let theta0: Vec<f64> = (0..6).map(|i| 0.2 * i as f64 - 0.5).collect();
        let run = |a: f64| {
            let config = QLearnConfig {
                step_rule: StepSizeRule::Constant(a),
                theta0: Some(theta0.clone()),
                ..QLearnConfig::default()
            };
            q_learning_run(&traj, &features, 0.9, &config).unwrap().final_theta
        };
        let t1 = run(1e-2);
        let t2 = run(2e-2);
        for j in 0..6 {
            let d1 = t1[j] - theta0[j];
            let d2 = t2[j] - theta0[j];
            assert!((d2 - 2.0 * d1).abs() < 1e-14);
        }
    }

    #[test]
    fn oversized_steps_trip_the_divergence_guard() {
        let (mdp, traj) = training_data(3, 100_000, 6);
        let features = tabular_basis(&mdp);
        let config = QLearnConfig {
            step_rule: StepSizeRule::Constant(10.0),
            guard: 1e8,
            ..QLearnConfig::default()
        };
        match q_learning_run(&traj, &features, 0.9, &config) {
            Err(QlearnError::DivergenceDetected { step, norm }) => {
                assert!(step <= 100_000);
                assert!(!norm.is_nan());
            }
            Ok(_) => panic!("α = 10 on a tabular basis must blow up"),
        }
    }

    #[test]
    fn trace_csv_round_trips_header_and_rows() {
        let (mdp, traj) = training_data(3, 2_000, 8);
        let features = tabular_basis(&mdp);
        let trace =
            q_learning_run(&traj, &features, 0.9, &QLearnConfig::default()).unwrap();
        let dir = std::env::temp_dir().join("qlearn_trace_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trace.csv");
        write_trace_csv(&path, &trace).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,theta_0,theta_1,theta_2,theta_3,theta_4,theta_5");
        assert_eq!(lines.count(), trace.snapshots.len());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn omega_mean_matches_visit_frequencies() {
        let (mdp, traj) = training_data(3, 50_000, 9);
        let features = tabular_basis(&mdp);
        let omega = omega_feature_mean_from_trajectory(&traj, &features);
        assert!((omega.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut counts = vec![0usize; 6];
        for s in &traj.steps {
            counts[s.state * 2 + s.action] += 1;
        }
        for (o, c) in omega.iter().zip(&counts) {
            assert!((o - *c as f64 / 50_000.0).abs() < 1e-12);
        }
    }
}

//! Continuous-state inventory control: the environment, threshold-policy
//! analytics, a common-random-number Monte-Carlo sweep for the ground-truth
//! threshold, and a four-algorithm comparison harness.
//!
//! The level evolves as `X(k+1) = X(k) - [β + W(k+1)] + U(k)` with stocking
//! decision `U ∈ {0,1}` and cost `c(x) = max(c⁺x, -c⁻x)`.  An optimal policy
//! orders exactly when the level falls to `-r̄` or below, and for small β the
//! optimal threshold is approximated by `r̄† = ln(1 + c⁺/c⁻)/ϱ`.

use std::io;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};

use crate::cvxq::{self, ConstraintSystem};
use crate::features::{binned_indicator_zeta, FeatureMap, LinearQ};
use crate::parallel;
use crate::qlearn::{q_learning_run, relative_q_learning_run, QLearnConfig, StepSizeRule};
use crate::simulate::{rollout_on_stream, stream_rng, BehaviorPolicy, Environment, Policy};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseLaw {
    /// `W ~ N(0,1)`.
    Gaussian,
    /// `W ~ Exp(1) - 1`.
    CenteredExponential,
}

impl NoiseLaw {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            NoiseLaw::Gaussian => rng.sample(StandardNormal),
            NoiseLaw::CenteredExponential => {
                rng.sample(Exp::new(1.0).expect("rate 1 is valid")) - 1.0
            }
        }
    }

    /// Both laws are zero mean with unit variance.
    pub fn variance(&self) -> f64 {
        1.0
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseLaw::Gaussian => "gaussian",
            NoiseLaw::CenteredExponential => "centered-exponential",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InventoryEnv {
    /// Mean depletion per step, > 0.
    pub beta: f64,
    /// Cost slope for surplus (x > 0).
    pub c_plus: f64,
    /// Cost slope for backlog (x < 0).
    pub c_minus: f64,
    pub noise: NoiseLaw,
}

impl InventoryEnv {
    /// β = 0.1, c⁻ = 1, c⁺ = 10, the setting behind `r̄† ≈ 8.77`.
    pub fn standard(noise: NoiseLaw) -> Self {
        InventoryEnv { beta: 0.1, c_plus: 10.0, c_minus: 1.0, noise }
    }

    pub fn cost(&self, x: f64) -> f64 {
        (self.c_plus * x).max(-self.c_minus * x)
    }
}

impl Environment for InventoryEnv {
    type State = f64;

    fn n_actions(&self) -> usize {
        2
    }

    fn initial_state(&self) -> f64 {
        0.0
    }

    fn step(&self, x: &f64, u: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
        assert!(u < 2);
        let w = self.noise.sample(rng);
        (x - (self.beta + w) + u as f64, self.cost(*x))
    }
}

/// Orders exactly when the level is at or below `-r̄`.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdPolicy {
    pub rbar: f64,
}

impl Policy<f64> for ThresholdPolicy {
    fn action(&self, x: &f64) -> usize {
        usize::from(*x <= -self.rbar)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ThresholdApprox {
    pub rho: f64,
    pub rbar_dagger: f64,
}

/// Small-β approximation of the optimal threshold:
/// `r̄† = ln(1 + c⁺/c⁻)/ϱ` with ϱ the positive root of
/// `σ²_W ϱ²/2 - βϱ - (1-γ) = 0`.  `literal_gamma` swaps the constant term
/// for γ itself; see [`rho_rbar`]'s tests for why the default is `1-γ`.
pub fn rho_rbar(
    beta: f64,
    sigma2_w: f64,
    gamma: f64,
    c_plus: f64,
    c_minus: f64,
    literal_gamma: bool,
) -> ThresholdApprox {
    assert!(beta > 0.0 && sigma2_w > 0.0 && c_plus > 0.0 && c_minus > 0.0);
    assert!((0.0..1.0).contains(&gamma) && gamma > 0.0);
    let constant = if literal_gamma { gamma } else { 1.0 - gamma };
    let rho = (beta + (beta * beta + 2.0 * sigma2_w * constant).sqrt()) / sigma2_w;
    ThresholdApprox { rho, rbar_dagger: (1.0 + c_plus / c_minus).ln() / rho }
}

/// Discounted-cost estimates over a threshold grid under common random
/// numbers: one disturbance family serves every threshold.
#[derive(Debug, Clone)]
pub struct SweepTable {
    pub grid: Vec<f64>,
    /// Replicate mean of `Σ_{k<N} γ^k c(X(k; r̄))` from `X(0) = 0`.
    pub j_hat: Vec<f64>,
    /// Monte-Carlo standard error of each mean.
    pub std_err: Vec<f64>,
    pub argmin_index: usize,
}

impl SweepTable {
    pub fn rbar_star(&self) -> f64 {
        self.grid[self.argmin_index]
    }

    pub fn to_csv<W: io::Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "rbar,j_hat,std_err")?;
        for i in 0..self.grid.len() {
            writeln!(out, "{:.17e},{:.17e},{:.17e}", self.grid[i], self.j_hat[i], self.std_err[i])?;
        }
        Ok(())
    }
}

/// `n_points` evenly spaced thresholds covering `[lo, hi]`.
pub fn threshold_grid(lo: f64, hi: f64, n_points: usize) -> Vec<f64> {
    assert!(n_points >= 1 && hi >= lo);
    if n_points == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (n_points - 1) as f64;
    (0..n_points).map(|i| lo + step * i as f64).collect()
}

/// Monte-Carlo sweep of threshold policies.  Replicate i draws its
/// disturbances from stream i+1 of `seed` and replays the identical array
/// for every grid point, so threshold comparisons share all randomness and
/// the table is reproducible bit for bit.
pub fn mc_threshold_sweep(
    env: &InventoryEnv,
    gamma: f64,
    grid: &[f64],
    horizon: usize,
    replicates: usize,
    seed: u64,
) -> SweepTable {
    assert!(!grid.is_empty() && horizon >= 1 && replicates >= 1);
    assert!((0.0..1.0).contains(&gamma));
    let per_replicate: Vec<Vec<f64>> = parallel::run_indexed(replicates, |i| {
        let mut rng = stream_rng(seed, i as u64 + 1);
        let w: Vec<f64> = (0..horizon).map(|_| env.noise.sample(&mut rng)).collect();
        grid.iter()
            .map(|rbar| {
                let policy = ThresholdPolicy { rbar: *rbar };
                let mut x = 0.0f64;
                let mut total = 0.0;
                let mut discount = 1.0;
                for wk in &w {
                    total += discount * env.cost(x);
                    discount *= gamma;
                    let u = policy.action(&x) as f64;
                    x = x - (env.beta + wk) + u;
                }
                total
            })
            .collect()
    });

    let nf = replicates as f64;
    let mut j_hat = vec![0.0; grid.len()];
    for row in &per_replicate {
        for (acc, v) in j_hat.iter_mut().zip(row) {
            *acc += v / nf;
        }
    }
    let std_err: Vec<f64> = (0..grid.len())
        .map(|j| {
            if replicates < 2 {
                return f64::NAN;
            }
            let var = per_replicate.iter().map(|r| (r[j] - j_hat[j]).powi(2)).sum::<f64>()
                / (nf - 1.0);
            (var / nf).sqrt()
        })
        .collect();
    let argmin_index = j_hat
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("costs are finite"))
        .map(|(i, _)| i)
        .expect("grid is nonempty");
    SweepTable { grid: grid.to_vec(), j_hat, std_err, argmin_index }
}

/// `ξ(x) = (x + e^{-δx} - 1)/δ` for `x ≥ 0`, zero otherwise: smooth ramps
/// with asymptote slope 1/δ that vanish on the backlog side.
pub fn xi(x: f64, delta: f64) -> f64 {
    if x >= 0.0 {
        (x + ((-delta * x).exp() - 1.0)) / delta
    } else {
        0.0
    }
}

pub const XI_DELTA_1: f64 = 0.5;
pub const XI_DELTA_2: f64 = 0.1;
/// State bins of the eligibility vectors, evenly spaced over `[-28, 28]`.
pub const ZETA_STATE_BINS: usize = 100;
/// Total eligibility rows: state bins crossed with the two actions.
pub const ZETA_BINS: usize = 2 * ZETA_STATE_BINS;

/// The 8-dimensional value basis `ψ(x,u) = [ψ'(x)1{u=0}; ψ'(x)1{u=1}]` with
/// `ψ'(x) = [ξ₁(x); ξ₂(x); x; 1]`, paired with 200 eligibility rows: 100
/// indicator bins evenly spaced on `[-28, 28]`, crossed with the action.
/// Action-blind bins would average both actions into each constraint row,
/// and the program's optimum then pins `Q(·,0) ≡ Q(·,1)` (every next-state
/// minimum ties, so the feasible set has a crease there that maximizers of
/// any state-symmetric objective settle on), leaving no policy signal; the
/// action split keeps each row's cap specific to one action block.
pub fn inventory_basis() -> FeatureMap<f64> {
    let psi = |x: &f64, u: usize| -> Vec<f64> {
        let block = [xi(*x, XI_DELTA_1), xi(*x, XI_DELTA_2), *x, 1.0];
        let mut v = vec![0.0; 8];
        v[4 * u..4 * u + 4].copy_from_slice(&block);
        v
    };
    let edges: Vec<f64> =
        (0..=ZETA_STATE_BINS).map(|i| -28.0 + 56.0 * i as f64 / ZETA_STATE_BINS as f64).collect();
    let state_bins = binned_indicator_zeta(edges);
    let zeta = move |x: &f64, u: usize| -> Vec<f64> {
        let bins = state_bins(x, 0);
        let mut v = vec![0.0; ZETA_BINS];
        v[ZETA_STATE_BINS * u..ZETA_STATE_BINS * (u + 1)].copy_from_slice(&bins);
        v
    };
    FeatureMap::new(8, ZETA_BINS, 2, psi, zeta)
}

/// `Σ_k [ψ(x_k, 0) + ψ(x_k, 1)]/2 / N`: the visited-state distribution
/// paired with uniform actions, the recentring and objective measure the
/// continuous-state runs use.
pub fn state_uniform_feature_mean(
    states: &[f64],
    features: &FeatureMap<f64>,
) -> Vec<f64> {
    assert!(!states.is_empty());
    let mut m = vec![0.0; features.d()];
    let w = 1.0 / (2.0 * states.len() as f64);
    for x in states {
        for u in 0..2 {
            for (mi, p) in m.iter_mut().zip(features.psi(x, u)) {
                *mi += w * p;
            }
        }
    }
    m
}

#[derive(Debug)]
pub enum InventoryError {
    /// The greedy action never switches inside the scan grid.
    NoCrossing,
}

impl std::fmt::Display for InventoryError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InventoryError::NoCrossing => {
                write!(f, "greedy action never switches on the scan grid")
            }
        }
    }
}

impl std::error::Error for InventoryError {}

/// Threshold read off a greedy policy, reported in both axis conventions.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdEstimate {
    /// Policy convention: order exactly when `x ≤ -rbar`.
    pub rbar: f64,
    /// Level convention: the highest grid level at which the greedy action
    /// still orders; `rbar = -switch_level`.
    pub switch_level: f64,
}

/// Default scan grid `[-30, 30]` in steps of 0.01, covering the eligibility
/// bin range with margin.
pub fn default_extraction_grid() -> Vec<f64> {
    (0..=6000).map(|i| -30.0 + 0.01 * i as f64).collect()
}

/// Minimal `r̄` such that the greedy action is "no order" at every grid
/// level above `-r̄`.  Errors when the greedy action never switches inside
/// the grid (including ordering at the top of the grid, where the switch
/// would lie beyond the scanned range).
pub fn extract_threshold(
    q: &LinearQ<'_, f64>,
    grid: &[f64],
) -> Result<ThresholdEstimate, InventoryError> {
    assert!(grid.len() >= 2);
    let orders = |x: &f64| q.underline_q(x).1 == 1;
    let switch_level = grid
        .iter()
        .rev()
        .find(|x| orders(x))
        .copied()
        .ok_or(InventoryError::NoCrossing)?;
    if switch_level == *grid.last().expect("grid is nonempty") {
        return Err(InventoryError::NoCrossing);
    }
    Ok(ThresholdEstimate { rbar: -switch_level, switch_level })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    CvxQ,
    RelativeCvxQ,
    QLearning,
    RelativeQLearning,
}

pub const ALL_ALGORITHMS: [Algorithm; 4] = [
    Algorithm::CvxQ,
    Algorithm::RelativeCvxQ,
    Algorithm::QLearning,
    Algorithm::RelativeQLearning,
];

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::CvxQ => "cvxq",
            Algorithm::RelativeCvxQ => "relative-cvxq",
            Algorithm::QLearning => "qlearn",
            Algorithm::RelativeQLearning => "relative-qlearn",
        }
    }

    fn index(&self) -> usize {
        ALL_ALGORITHMS.iter().position(|a| a == self).expect("algorithm is listed")
    }
}

/// One training run's outcome; solver failures are recorded, never fatal.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub theta: Option<Vec<f64>>,
    pub rbar: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ComparisonConfig {
    pub horizon: usize,
    pub runs: usize,
    /// Probability of a uniform action; the rest follows the backbone
    /// threshold policy.
    pub exploration: f64,
    /// Backbone threshold of the behavior policy.
    pub behavior_rbar: f64,
    pub qlearn_step: f64,
    /// Recentring rate of the relative variants.
    pub delta: f64,
    pub extraction_grid: Vec<f64>,
}

impl ComparisonConfig {
    /// Paper-scale defaults for the standard environment: N = 10⁴, M = 100,
    /// 10% exploration around the `r̄†` backbone, δ = 1-γ.
    pub fn standard(env: &InventoryEnv, gamma: f64) -> Self {
        let approx =
            rho_rbar(env.beta, env.noise.variance(), gamma, env.c_plus, env.c_minus, false);
        ComparisonConfig {
            horizon: 10_000,
            runs: 100,
            exploration: 0.1,
            behavior_rbar: approx.rbar_dagger,
            qlearn_step: 1e-3,
            delta: 1.0 - gamma,
            extraction_grid: default_extraction_grid(),
        }
    }
}

pub struct ComparisonResult {
    pub horizon: usize,
    /// Indexed in [`ALL_ALGORITHMS`] order.
    pub records: [Vec<RunRecord>; 4],
}

struct EpsilonThreshold {
    backbone: ThresholdPolicy,
    exploration: f64,
}

impl BehaviorPolicy<f64> for EpsilonThreshold {
    fn sample_action(&self, x: &f64, rng: &mut ChaCha8Rng) -> usize {
        if rng.gen::<f64>() < self.exploration {
            usize::from(rng.gen::<f64>() < 0.5)
        } else {
            self.backbone.action(x)
        }
    }
}

impl ComparisonResult {
    pub fn records_for(&self, alg: Algorithm) -> &[RunRecord] {
        &self.records[alg.index()]
    }

    /// `[r̄^m - r̄*]/r̄*` over the runs that produced a threshold.
    pub fn relative_errors(&self, alg: Algorithm, rbar_star: f64) -> Vec<f64> {
        self.records_for(alg)
            .iter()
            .filter_map(|r| r.rbar)
            .map(|rb| (rb - rbar_star) / rbar_star)
            .collect()
    }

    /// Sample variance of the relative errors; None below two samples.
    pub fn relative_error_variance(&self, alg: Algorithm, rbar_star: f64) -> Option<f64> {
        let errs = self.relative_errors(alg, rbar_star);
        (errs.len() >= 2).then(|| stats::sample_variance(&errs))
    }

    /// `√N [θ^m - θ̄]` over the runs that produced a parameter vector, with
    /// θ̄ their average; None below two samples.
    pub fn scaled_parameter_errors(&self, alg: Algorithm) -> Option<Vec<Vec<f64>>> {
        let thetas: Vec<Vec<f64>> =
            self.records_for(alg).iter().filter_map(|r| r.theta.clone()).collect();
        if thetas.len() < 2 {
            return None;
        }
        let mean = stats::mean_vector(&thetas);
        let scale = (self.horizon as f64).sqrt();
        Some(
            thetas
                .iter()
                .map(|th| th.iter().zip(&mean).map(|(t, m)| scale * (t - m)).collect())
                .collect(),
        )
    }

    pub fn failures(&self, alg: Algorithm) -> usize {
        self.records_for(alg).iter().filter(|r| r.failure.is_some()).count()
    }

    /// One row per (algorithm, run): thresholds, parameters, failures.
    pub fn write_runs_csv<W: io::Write>(&self, out: &mut W) -> io::Result<()> {
        let d = self
            .records
            .iter()
            .flatten()
            .find_map(|r| r.theta.as_ref().map(Vec::len))
            .unwrap_or(0);
        write!(out, "algorithm,run,rbar")?;
        for i in 0..d {
            write!(out, ",theta_{i}")?;
        }
        writeln!(out, ",failure")?;
        for alg in ALL_ALGORITHMS {
            for (m, rec) in self.records_for(alg).iter().enumerate() {
                write!(out, "{},{m}", alg.as_str())?;
                match rec.rbar {
                    Some(rb) => write!(out, ",{rb:.17e}")?,
                    None => write!(out, ",")?,
                }
                for i in 0..d {
                    match &rec.theta {
                        Some(th) => write!(out, ",{:.17e}", th[i])?,
                        None => write!(out, ",")?,
                    }
                }
                writeln!(out, ",{}", rec.failure.as_deref().unwrap_or(""))?;
            }
        }
        Ok(())
    }

    /// Per-algorithm summary: counts, failure counts, relative-error moments
    /// and quantiles against the supplied ground-truth threshold.
    pub fn summary_json(&self, rbar_star: f64) -> String {
        let per_alg: Vec<serde_json::Value> = ALL_ALGORITHMS
            .iter()
            .map(|alg| {
                let errs = self.relative_errors(*alg, rbar_star);
                let var = self.relative_error_variance(*alg, rbar_star);
                let quantiles = if errs.is_empty() {
                    serde_json::Value::Null
                } else {
                    serde_json::json!({
                        "p10": stats::quantile(&errs, 0.1),
                        "p50": stats::quantile(&errs, 0.5),
                        "p90": stats::quantile(&errs, 0.9),
                    })
                };
                serde_json::json!({
                    "algorithm": alg.as_str(),
                    "runs": self.records_for(*alg).len(),
                    "thresholds_extracted": errs.len(),
                    "failures": self.failures(*alg),
                    "relative_error_mean": if errs.is_empty() { None } else { Some(stats::mean(&errs)) },
                    "relative_error_variance": var,
                    "relative_error_quantiles": quantiles,
                })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "horizon": self.horizon,
            "rbar_star": rbar_star,
            "algorithms": per_alg,
        }))
        .expect("summary serialization cannot fail")
    }
}

fn record_solver<E: std::fmt::Display>(
    result: Result<Vec<f64>, E>,
    features: &FeatureMap<f64>,
    grid: &[f64],
) -> RunRecord {
    match result {
        Err(e) => RunRecord { theta: None, rbar: None, failure: Some(e.to_string()) },
        Ok(theta) => {
            let q = LinearQ::new(features, theta.clone());
            match extract_threshold(&q, grid) {
                Ok(est) => RunRecord { theta: Some(theta), rbar: Some(est.rbar), failure: None },
                Err(e) => {
                    RunRecord { theta: Some(theta), rbar: None, failure: Some(e.to_string()) }
                }
            }
        }
    }
}

/// Trains all four algorithms on identical per-run trajectories (run m draws
/// stream m+1 of `seed`) and records every outcome.
pub fn run_comparison(
    env: &InventoryEnv,
    gamma: f64,
    config: &ComparisonConfig,
    seed: u64,
) -> ComparisonResult {
    assert!((0.0..1.0).contains(&gamma) && config.runs >= 1);
    let features = inventory_basis();
    let behavior = EpsilonThreshold {
        backbone: ThresholdPolicy { rbar: config.behavior_rbar },
        exploration: config.exploration,
    };
    let per_run: Vec<[RunRecord; 4]> = parallel::run_indexed(config.runs, |m| {
        let traj = rollout_on_stream(env, &behavior, config.horizon, seed, m as u64 + 1);
        let states: Vec<f64> = traj.steps.iter().map(|s| s.state).collect();
        let omega = state_uniform_feature_mean(&states, &features);

        let cs = ConstraintSystem::from_trajectory(&traj, &features, gamma, omega.clone());
        let radius = cs.default_box_radius();
        let cvxq_theta =
            cvxq::solve_cvxq_constraint_gen(&cs, radius).map(|rep| rep.theta);
        let rel_cs = cs.with_relative(config.delta, omega.clone());
        let rel_theta =
            cvxq::solve_relative_cvxq_constraint_gen(&rel_cs, radius).map(|rep| rep.theta);

        let qconfig = QLearnConfig {
            step_rule: StepSizeRule::Constant(config.qlearn_step),
            trace_stride: config.horizon,
            ..QLearnConfig::default()
        };
        let q_theta =
            q_learning_run(&traj, &features, gamma, &qconfig).map(|t| t.final_theta);
        let rq_theta =
            relative_q_learning_run(&traj, &features, gamma, &qconfig, config.delta, &omega)
                .map(|t| t.final_theta);

        [
            record_solver(cvxq_theta, &features, &config.extraction_grid),
            record_solver(rel_theta, &features, &config.extraction_grid),
            record_solver(q_theta, &features, &config.extraction_grid),
            record_solver(rq_theta, &features, &config.extraction_grid),
        ]
    });

    let mut records: [Vec<RunRecord>; 4] = Default::default();
    for run in per_run {
        for (slot, rec) in records.iter_mut().zip(run) {
            slot.push(rec);
        }
    }
    ComparisonResult { horizon: config.horizon, records }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::rollout;

    #[test]
    fn threshold_approximation_reproduces_the_reference_value() {
        let approx = rho_rbar(0.1, 1.0, 0.99, 10.0, 1.0, false);
        // positive root of ϱ²/2 - 0.1ϱ - 0.01
        let residual = 0.5 * approx.rho * approx.rho - 0.1 * approx.rho - 0.01;
        assert!(residual.abs() < 1e-12);
        assert!((approx.rbar_dagger - 8.77).abs() < 0.01, "r̄† = {}", approx.rbar_dagger);

        let literal = rho_rbar(0.1, 1.0, 0.99, 10.0, 1.0, true);
        assert!((literal.rbar_dagger - 1.59).abs() < 0.01, "literal r̄† = {}", literal.rbar_dagger);
    }

    #[test]
    fn equal_cost_slopes_give_log_two_over_rho() {
        let approx = rho_rbar(0.2, 1.0, 0.95, 3.0, 3.0, false);
        assert!((approx.rbar_dagger - 2.0f64.ln() / approx.rho).abs() < 1e-15);
    }

    #[test]
    fn step_satisfies_the_evolution_equation_exactly() {
        for noise in [NoiseLaw::Gaussian, NoiseLaw::CenteredExponential] {
            let env = InventoryEnv::standard(noise);
            let mut rng = stream_rng(3, 0);
            let mut probe = rng.clone();
            let x = -2.75;
            for u in 0..2 {
                let (next, cost) = env.step(&x, u, &mut rng);
                let w = noise.sample(&mut probe);
                assert_eq!(next, x - (env.beta + w) + u as f64);
                assert_eq!(cost, env.cost(x));
            }
        }
    }

    #[test]
    fn cost_is_nonnegative_with_a_single_kink_at_zero() {
        let env = InventoryEnv::standard(NoiseLaw::Gaussian);
        assert_eq!(env.cost(0.0), 0.0);
        assert_eq!(env.cost(2.0), 20.0);
        assert_eq!(env.cost(-3.0), 3.0);
        for x in [-7.3, -0.01, 0.0, 0.5, 12.0] {
            assert!(env.cost(x) >= 0.0);
            // affine on each side of zero
            if x > 0.0 {
                assert_eq!(env.cost(2.0 * x), 2.0 * env.cost(x));
            }
        }
    }

    #[test]
    fn centered_exponential_noise_has_zero_mean_unit_variance() {
        let mut rng = stream_rng(11, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| NoiseLaw::CenteredExponential.sample(&mut rng)).collect();
        assert!(stats::mean(&xs).abs() < 0.01);
        assert!((stats::sample_variance(&xs) - 1.0).abs() < 0.02);
        assert!(xs.iter().all(|x| *x >= -1.0));
    }

    #[test]
    fn ramp_features_vanish_on_the_backlog_side_and_slope_correctly() {
        for delta in [XI_DELTA_1, XI_DELTA_2] {
            assert_eq!(xi(0.0, delta), 0.0);
            assert_eq!(xi(-1.0, delta), 0.0);
            assert_eq!(xi(-1e-12, delta), 0.0);
            let slope = (xi(100.5, delta) - xi(99.5, delta)) / 1.0;
            assert!(
                (slope - 1.0 / delta).abs() <= 0.01 / delta,
                "slope {slope} vs asymptote {}",
                1.0 / delta
            );
        }
    }

    #[test]
    fn basis_has_action_block_structure() {
        let features = inventory_basis();
        assert_eq!(features.d(), 8);
        assert_eq!(features.const_d(), ZETA_BINS);
        let psi0 = features.psi(&3.5, 0);
        let psi1 = features.psi(&3.5, 1);
        assert!(psi0[4..].iter().all(|v| *v == 0.0));
        assert!(psi1[..4].iter().all(|v| *v == 0.0));
        assert_eq!(psi0[..4], psi1[4..]);
        // strictly positive level: both ramps, the level, and the constant
        assert_eq!(psi0.iter().filter(|v| **v != 0.0).count(), 4);
        // backlog level: ramps vanish
        let neg = features.psi(&-3.5, 0);
        assert_eq!(neg.iter().filter(|v| **v != 0.0).count(), 2);
    }

    #[test]
    fn eligibility_bins_activate_only_around_the_level_and_action() {
        let features = inventory_basis();
        let z = features.zeta(&0.07, 1);
        let active: Vec<usize> =
            z.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(active.len(), 1);
        // bin width 0.56: level 0.07 sits in state bin 50, offset into the u=1 block
        assert_eq!(active[0], ZETA_STATE_BINS + 50);
        let z0 = features.zeta(&0.07, 0);
        assert_eq!(z0.iter().position(|v| *v != 0.0), Some(50));
        assert!(features.zeta(&29.0, 0).iter().all(|v| *v == 0.0));
        assert!(features.zeta(&-29.0, 0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sweep_is_reproducible_bit_for_bit() {
        let env = InventoryEnv::standard(NoiseLaw::Gaussian);
        let grid = threshold_grid(0.0, 10.0, 11);
        let a = mc_threshold_sweep(&env, 0.95, &grid, 300, 40, 99);
        let b = mc_threshold_sweep(&env, 0.95, &grid, 300, 40, 99);
        assert_eq!(a.j_hat, b.j_hat);
        assert_eq!(a.std_err, b.std_err);
        assert_eq!(a.argmin_index, b.argmin_index);
    }

    #[test]
    fn degenerate_grid_returns_its_single_point() {
        let env = InventoryEnv::standard(NoiseLaw::CenteredExponential);
        let table = mc_threshold_sweep(&env, 0.9, &[4.25], 100, 10, 1);
        assert_eq!(table.rbar_star(), 4.25);
        assert_eq!(table.j_hat.len(), 1);
    }

    #[test]
    fn doubling_replicates_shrinks_the_standard_error_by_root_two() {
        let env = InventoryEnv::standard(NoiseLaw::Gaussian);
        let grid = threshold_grid(2.0, 8.0, 4);
        let small = mc_threshold_sweep(&env, 0.95, &grid, 500, 600, 5);
        let large = mc_threshold_sweep(&env, 0.95, &grid, 500, 1200, 5);
        let ratio = stats::mean(&small.std_err) / stats::mean(&large.std_err);
        assert!(
            (ratio - std::f64::consts::SQRT_2).abs() < 0.15,
            "standard-error ratio {ratio}"
        );
    }

    #[test]
    fn constructed_affine_preference_recovers_its_root() {
        let features = inventory_basis();
        // Q(x,0) - Q(x,1) = -x - 5: orders exactly below -5
        let theta = vec![0.0, 0.0, -0.5, -2.5, 0.0, 0.0, 0.5, 2.5];
        let q = LinearQ::new(&features, theta);
        let est = extract_threshold(&q, &default_extraction_grid()).unwrap();
        assert!((est.rbar - 5.0).abs() <= 0.011, "rbar {}", est.rbar);
        assert_eq!(est.switch_level, -est.rbar);
    }

    #[test]
    fn threshold_extraction_rejects_constant_preferences() {
        let features = inventory_basis();
        // equal blocks: Q(x,0) = Q(x,1), greedy always picks action 0
        let theta = vec![0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4];
        let q = LinearQ::new(&features, theta);
        match extract_threshold(&q, &default_extraction_grid()) {
            Err(InventoryError::NoCrossing) => {}
            other => panic!("expected NoCrossing, got {other:?}"),
        }
        // always orders: switch would lie beyond the grid top
        let theta = vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let q = LinearQ::new(&features, theta);
        assert!(matches!(
            extract_threshold(&q, &default_extraction_grid()),
            Err(InventoryError::NoCrossing)
        ));
    }

    #[test]
    fn behavior_chain_stays_inside_the_eligibility_range() {
        let env = InventoryEnv::standard(NoiseLaw::Gaussian);
        let config = ComparisonConfig::standard(&env, 0.99);
        let behavior = EpsilonThreshold {
            backbone: ThresholdPolicy { rbar: config.behavior_rbar },
            exploration: config.exploration,
        };
        let traj = rollout(&env, &behavior, 20_000, 17);
        let inside = traj
            .steps
            .iter()
            .filter(|s| (-28.0..=28.0).contains(&s.state))
            .count() as f64
            / traj.steps.len() as f64;
        assert!(inside >= 0.9, "only {inside:.3} of the chain is inside the bin range");
    }

    #[test]
    fn converged_solve_lands_near_the_monte_carlo_minimizer() {
        let env = InventoryEnv::standard(NoiseLaw::Gaussian);
        let gamma = 0.99;
        let mut config = ComparisonConfig::standard(&env, gamma);
        config.horizon = 30_000;
        config.runs = 1;
        let result = run_comparison(&env, gamma, &config, 0xA11CE);
        let rec = &result.records_for(Algorithm::CvxQ)[0];
        assert!(rec.failure.is_none(), "solver failed: {:?}", rec.failure);
        let rbar = rec.rbar.expect("threshold extracted");

        let grid = threshold_grid(5.0, 11.0, 61);
        let sweep = mc_threshold_sweep(&env, gamma, &grid, 3_000, 300, 0xA11CE);
        assert!(
            (rbar - sweep.rbar_star()).abs() <= 1.0,
            "extracted {rbar} vs Monte-Carlo {}",
            sweep.rbar_star()
        );
    }

    #[test]
    fn single_run_reports_undefined_variance() {
        let env = InventoryEnv::standard(NoiseLaw::Gaussian);
        let gamma = 0.95;
        let mut config = ComparisonConfig::standard(&env, gamma);
        config.horizon = 2_000;
        config.runs = 1;
        let result = run_comparison(&env, gamma, &config, 8);
        assert!(result.relative_error_variance(Algorithm::CvxQ, 8.77).is_none());
        let json = result.summary_json(8.77);
        assert!(json.contains("\"relative_error_variance\": null"));
    }

    #[test]
    fn scaled_parameter_errors_pass_a_normality_sanity_check() {
        let env = InventoryEnv::standard(NoiseLaw::Gaussian);
        let gamma = 0.99;
        let mut config = ComparisonConfig::standard(&env, gamma);
        config.horizon = 4_000;
        config.runs = 50;
        let result = run_comparison(&env, gamma, &config, 0xBEEF);
        let rows = result.scaled_parameter_errors(Algorithm::CvxQ).expect("enough runs");
        assert!(rows.len() >= 45, "too many failed runs: {}", rows.len());
        let m = rows.len() as f64;
        // 99% Gaussian bands for moment-form skewness and excess kurtosis
        let skew_band = 2.576 * (6.0 / m).sqrt();
        let kurt_band = 2.576 * (24.0 / m).sqrt();
        let mut within = 0;
        for coord in 0..8 {
            let xs: Vec<f64> = rows.iter().map(|r| r[coord]).collect();
            if stats::skewness(&xs).abs() <= skew_band
                && stats::excess_kurtosis(&xs).abs() <= kurt_band
            {
                within += 1;
            }
        }
        assert!(within >= 6, "only {within}/8 coordinates look Gaussian");
    }
}

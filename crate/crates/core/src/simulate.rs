//! Trajectory generation for finite MDPs and generic environments under
//! randomized behavior policies.
//!
//! All randomness flows through [`ChaCha8Rng`], a counter-based generator:
//! seeding is cheap, and independent streams derived from one seed via
//! `set_stream` let common-random-number experiments regenerate identical
//! disturbance sequences across configurations instead of storing them.
//! Within one rollout the draw order is fixed (behavior policy first, then
//! environment), so trajectories are reproducible bit-for-bit from
//! `(env, policy, n, seed)`.

use crate::mdp::{DeterministicPolicy, FiniteMdp, RandomizedPolicy};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io;

/// One observed transition `(x_k, u_k, c_k, x_{k+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct Step<S> {
    pub state: S,
    pub action: usize,
    pub cost: f64,
    pub next_state: S,
}

/// A finite run of transitions plus the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S> {
    pub steps: Vec<Step<S>>,
    pub seed: u64,
}

impl<S> Trajectory<S> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Controlled stochastic dynamics consumed by [`rollout`].
pub trait Environment {
    type State: Clone;

    fn n_actions(&self) -> usize;
    fn initial_state(&self) -> Self::State;
    /// Advances one step, returning the next state and the incurred cost
    /// `c(x, u)`.  Must be deterministic given the rng stream.
    fn step(&self, x: &Self::State, u: usize, rng: &mut ChaCha8Rng) -> (Self::State, f64);
}

/// Deterministic stationary policy over states of type `S`.
pub trait Policy<S> {
    fn action(&self, x: &S) -> usize;
}

impl Policy<usize> for DeterministicPolicy {
    fn action(&self, x: &usize) -> usize {
        DeterministicPolicy::action(self, *x)
    }
}

/// Randomized stationary policy over states of type `S`.
pub trait BehaviorPolicy<S> {
    fn sample_action(&self, x: &S, rng: &mut ChaCha8Rng) -> usize;
}

impl BehaviorPolicy<usize> for RandomizedPolicy {
    fn sample_action(&self, x: &usize, rng: &mut ChaCha8Rng) -> usize {
        sample_categorical(rng, |u| self.prob(*x, u), self.n_actions())
    }
}

/// Exploration wrapper: with probability `epsilon` draw from `action_probs`,
/// otherwise play the base policy's action.
pub struct EpsilonGreedy<P> {
    base: P,
    epsilon: f64,
    action_probs: Vec<f64>,
}

impl<P> EpsilonGreedy<P> {
    pub fn new(base: P, epsilon: f64, action_probs: Vec<f64>) -> Self {
        assert!((0.0..=1.0).contains(&epsilon));
        let total: f64 = action_probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-12, "action distribution must be a pmf");
        assert!(action_probs.iter().all(|p| *p >= 0.0));
        EpsilonGreedy { base, epsilon, action_probs }
    }

    pub fn uniform(base: P, epsilon: f64, n_actions: usize) -> Self {
        EpsilonGreedy::new(base, epsilon, vec![1.0 / n_actions as f64; n_actions])
    }
}

impl<S, P: Policy<S>> BehaviorPolicy<S> for EpsilonGreedy<P> {
    fn sample_action(&self, x: &S, rng: &mut ChaCha8Rng) -> usize {
        // Draw the exploration coin first so the stream layout is fixed even
        // when epsilon is 0 or 1.
        let coin: f64 = rng.gen();
        if coin < self.epsilon {
            sample_categorical(rng, |u| self.action_probs[u], self.action_probs.len())
        } else {
            self.base.action(x)
        }
    }
}

fn sample_categorical<F: Fn(usize) -> f64>(rng: &mut ChaCha8Rng, pmf: F, n: usize) -> usize {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for u in 0..n {
        acc += pmf(u);
        if draw < acc {
            return u;
        }
    }
    n - 1
}

/// RNG for stream `stream` of the family identified by `seed`.  Distinct
/// streams are statistically independent; the same `(seed, stream)` pair
/// always reproduces the same sequence.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulates `n` transitions from the environment's initial state.
pub fn rollout<E, B>(env: &E, policy: &B, n: usize, seed: u64) -> Trajectory<E::State>
where
    E: Environment,
    B: BehaviorPolicy<E::State>,
{
    rollout_on_stream(env, policy, n, seed, 0)
}

/// [`rollout`] on a chosen stream of the seed family, so replicate r can use
/// stream r without coordinating seeds.
pub fn rollout_on_stream<E, B>(
    env: &E,
    policy: &B,
    n: usize,
    seed: u64,
    stream: u64,
) -> Trajectory<E::State>
where
    E: Environment,
    B: BehaviorPolicy<E::State>,
{
    assert!(n >= 1);
    let mut rng = stream_rng(seed, stream);
    let mut steps = Vec::with_capacity(n);
    let mut x = env.initial_state();
    for _ in 0..n {
        let u = policy.sample_action(&x, &mut rng);
        let (x_next, cost) = env.step(&x, u, &mut rng);
        steps.push(Step { state: x.clone(), action: u, cost, next_state: x_next.clone() });
        x = x_next;
    }
    Trajectory { steps, seed }
}

/// Finite MDP viewed as an [`Environment`] starting from state 0.
pub struct MdpEnv<'a> {
    mdp: &'a FiniteMdp,
}

impl<'a> MdpEnv<'a> {
    pub fn new(mdp: &'a FiniteMdp) -> Self {
        MdpEnv { mdp }
    }
}

impl Environment for MdpEnv<'_> {
    type State = usize;

    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn initial_state(&self) -> usize {
        0
    }

    fn step(&self, x: &usize, u: usize, rng: &mut ChaCha8Rng) -> (usize, f64) {
        let next = sample_categorical(rng, |x2| self.mdp.transition_prob(*x, u, x2), self.mdp.n_states());
        (next, self.mdp.cost(*x, u))
    }
}

/// Writes a trajectory as CSV with columns `k,x,u,cost,x_next`.
pub fn write_trajectory_csv<S: std::fmt::Display, W: io::Write>(
    traj: &Trajectory<S>,
    mut out: W,
) -> io::Result<()> {
    writeln!(out, "k,x,u,cost,x_next")?;
    for (k, s) in traj.steps.iter().enumerate() {
        writeln!(out, "{k},{},{},{},{}", s.state, s.action, s.cost, s.next_state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::joint_invariant_pmf;
    use nalgebra::DMatrix;

    fn test_mdp() -> FiniteMdp {
        let p0 = DMatrix::from_row_slice(3, 3, &[0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.1, 0.2, 0.7]);
        let p1 = DMatrix::from_row_slice(3, 3, &[0.1, 0.8, 0.1, 0.3, 0.3, 0.4, 0.5, 0.4, 0.1]);
        let cost = DMatrix::from_row_slice(3, 2, &[0.2, 1.0, 0.5, 0.1, 0.9, 0.4]);
        FiniteMdp::new(vec![p0, p1], cost, 0.8).unwrap()
    }

    #[test]
    fn same_seed_reproduces_trajectory() {
        let mdp = test_mdp();
        let env = MdpEnv::new(&mdp);
        let pol = RandomizedPolicy::uniform(3, 2);
        let a = rollout(&env, &pol, 500, 42);
        let b = rollout(&env, &pol, 500, 42);
        assert_eq!(a, b);
        let c = rollout(&env, &pol, 500, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn steps_chain_and_costs_match_model() {
        let mdp = test_mdp();
        let env = MdpEnv::new(&mdp);
        let pol = RandomizedPolicy::uniform(3, 2);
        let traj = rollout(&env, &pol, 200, 7);
        for w in traj.steps.windows(2) {
            assert_eq!(w[0].next_state, w[1].state);
        }
        for s in &traj.steps {
            assert_eq!(s.cost, mdp.cost(s.state, s.action));
        }
    }

    #[test]
    fn single_state_env_is_constant() {
        let p = DMatrix::from_row_slice(1, 1, &[1.0]);
        let mdp = FiniteMdp::new(vec![p], DMatrix::from_row_slice(1, 1, &[0.3]), 0.5).unwrap();
        let env = MdpEnv::new(&mdp);
        let pol = RandomizedPolicy::uniform(1, 1);
        let traj = rollout(&env, &pol, 50, 1);
        assert!(traj.steps.iter().all(|s| s.state == 0 && s.next_state == 0 && s.cost == 0.3));
    }

    #[test]
    fn occupation_frequencies_match_invariant_pmf() {
        let mdp = test_mdp();
        let pol = RandomizedPolicy::uniform(3, 2);
        let pmf = joint_invariant_pmf(&mdp, &pol).unwrap();
        let env = MdpEnv::new(&mdp);
        let n = 1_000_000;
        let traj = rollout(&env, &pol, n, 12345);
        let mut freq = vec![0.0; mdp.n_pairs()];
        for s in &traj.steps {
            freq[mdp.z_index(s.state, s.action)] += 1.0 / n as f64;
        }
        let tv: f64 = 0.5 * freq.iter().zip(&pmf).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv <= 1e-2, "total variation {tv}");
    }

    #[test]
    fn epsilon_greedy_exploration_frequency() {
        let mdp = test_mdp();
        let env = MdpEnv::new(&mdp);
        let base = DeterministicPolicy::new(vec![0, 0, 0], 2).unwrap();
        let pol = EpsilonGreedy::uniform(base, 0.9, 2);
        let traj = rollout(&env, &pol, 200_000, 9);
        let nonbase = traj.steps.iter().filter(|s| s.action != 0).count() as f64 / traj.len() as f64;
        assert!((nonbase - 0.45).abs() < 1e-2, "non-base frequency {nonbase}");
    }

    #[test]
    fn epsilon_extremes() {
        let mdp = test_mdp();
        let env = MdpEnv::new(&mdp);
        let base = DeterministicPolicy::new(vec![1, 1, 1], 2).unwrap();
        let never = rollout(&env, &EpsilonGreedy::uniform(base.clone(), 0.0, 2), 300, 5);
        assert!(never.steps.iter().all(|s| s.action == 1));
        let always = rollout(&env, &EpsilonGreedy::uniform(base, 1.0, 2), 100_000, 5);
        let frac = always.steps.iter().filter(|s| s.action == 0).count() as f64 / 100_000.0;
        assert!((frac - 0.5).abs() < 1e-2);
    }

    #[test]
    fn csv_dump_has_expected_shape() {
        let mdp = test_mdp();
        let env = MdpEnv::new(&mdp);
        let traj = rollout(&env, &RandomizedPolicy::uniform(3, 2), 3, 2);
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "k,x,u,cost,x_next");
        assert!(lines[1].starts_with("0,"));
    }
}

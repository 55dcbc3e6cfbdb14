//! Simulated users: soft-optimal under their own internal dynamics, executed
//! in the real environment. Also demonstration collection and constraint
//! sampling.

pub mod demos;
pub mod lattice;

use std::collections::BTreeMap;

use rand::{Rng, RngCore};

use crate::envs::{Environment, GridWorld, Outcome, PointMass2D};
use crate::error::{invalid, Result};
use crate::models::{DynamicsModel, ModelRecord};
use crate::numeric::softmax;
use crate::soft::{soft_value_iteration, ActionDistribution, SoftQFunction, State, TabularMdp, TabularSoftQ};
use crate::util::{short_hash, stream_rng};

pub use demos::{format_demos, load_demos, parse_demos, save_demos, DemoSet, Episode, Transition};
pub use lattice::{Axis, LatticeSoftQ, LatticeSpec};

/// Per-task soft Q of a simulated user.
#[derive(Debug, Clone)]
pub enum UserQ {
    Tabular(TabularSoftQ),
    Lattice(LatticeSoftQ),
}

impl SoftQFunction for UserQ {
    fn q_values(&self, s: &State) -> Result<Vec<f64>> {
        match self {
            UserQ::Tabular(q) => q.q_values(s),
            UserQ::Lattice(q) => q.q_values(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserOptions {
    /// Sharpening exponent: the user acts with `softmax(β·Q)`.
    pub beta: f64,
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for UserOptions {
    fn default() -> Self {
        Self {
            beta: 1.0,
            tolerance: 1e-8,
            max_sweeps: 10_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedUser {
    pub internal: DynamicsModel,
    pub beta: f64,
    pub policies: BTreeMap<usize, UserQ>,
    pub config_hash: String,
}

fn user_hash(internal: &DynamicsModel, beta: f64, tasks: &[usize]) -> String {
    let record = serde_json::to_string(&ModelRecord::from(internal)).expect("records serialize");
    short_hash(format!("{record}|beta={beta:e}|tasks={tasks:?}").as_bytes())
}

impl SimulatedUser {
    pub fn q(&self, task_id: usize) -> Result<&UserQ> {
        self.policies
            .get(&task_id)
            .ok_or_else(|| invalid(format!("user has no policy for task {task_id}")))
    }

    pub fn q_values(&self, task_id: usize, s: &State) -> Result<Vec<f64>> {
        self.q(task_id)?.q_values(s)
    }

    pub fn policy(&self, task_id: usize, s: &State) -> Result<ActionDistribution> {
        let q = self.q_values(task_id, s)?;
        if q.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite user Q at {s}")));
        }
        let scaled: Vec<f64> = q.iter().map(|v| v * self.beta).collect();
        Ok(ActionDistribution { probs: softmax(&scaled) })
    }

    pub fn sample_action(&self, task_id: usize, s: &State, rng: &mut dyn RngCore) -> Result<usize> {
        Ok(sample_index(&self.policy(task_id, s)?.probs, rng))
    }
}

pub(crate) fn sample_index(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Grid user: exact soft value iteration under the internal model per task.
pub fn build_grid_user(
    env: &GridWorld,
    internal: DynamicsModel,
    tasks: &[usize],
    options: UserOptions,
) -> Result<SimulatedUser> {
    if options.beta < 1.0 {
        return Err(invalid("sharpening exponent must be at least 1"));
    }
    let mut policies = BTreeMap::new();
    for &t in tasks {
        let task = env.task(t);
        let mdp = TabularMdp::from_models(env.state_count(), &internal, &task)?;
        let q = soft_value_iteration(&mdp, options.tolerance, options.max_sweeps)?;
        policies.insert(t, UserQ::Tabular(q));
    }
    Ok(SimulatedUser {
        config_hash: user_hash(&internal, options.beta, tasks),
        internal,
        beta: options.beta,
        policies,
    })
}

/// Point-mass user: lattice soft value iteration under a linear internal model.
pub fn build_pointmass_user(
    env: &PointMass2D,
    internal: DynamicsModel,
    tasks: &[usize],
    options: UserOptions,
) -> Result<SimulatedUser> {
    if options.beta < 1.0 {
        return Err(invalid("sharpening exponent must be at least 1"));
    }
    let DynamicsModel::Linear(dynamics) = &internal else {
        return Err(invalid("point-mass users need linear internal dynamics"));
    };
    let spec = LatticeSpec::for_dynamics(dynamics);
    let mut policies = BTreeMap::new();
    for &t in tasks {
        let q = LatticeSoftQ::solve(
            spec,
            *dynamics,
            env.point_task(t),
            env.discount,
            options.tolerance.max(1e-6),
            options.max_sweeps,
        )?;
        policies.insert(t, UserQ::Lattice(q));
    }
    Ok(SimulatedUser {
        config_hash: user_hash(&internal, options.beta, tasks),
        internal,
        beta: options.beta,
        policies,
    })
}

/// Runs one episode of `choose` in the real environment.
pub fn rollout(
    env: &dyn Environment,
    task_id: usize,
    rng: &mut dyn RngCore,
    mut choose: impl FnMut(&State, &mut dyn RngCore) -> Result<usize>,
) -> Result<(Vec<Transition>, Outcome, f64)> {
    let mut s = env.reset(task_id, rng);
    let mut transitions = Vec::new();
    let mut ret = 0.0;
    for t in 0..env.max_steps() {
        let a = choose(&s, rng)?;
        let step = env.step(task_id, &s, a, t);
        transitions.push(Transition {
            state: s,
            action: a,
            next: step.next,
        });
        ret += step.reward;
        s = step.next;
        if step.done {
            return Ok((transitions, step.outcome, ret));
        }
    }
    Ok((transitions, Outcome::Timeout, ret))
}

/// `episodes` user rollouts on one task; episode `k` draws from the seed
/// stream `(seed, task, k)`.
pub fn collect_demos(
    user: &SimulatedUser,
    env: &dyn Environment,
    task_id: usize,
    episodes: usize,
    seed: u64,
) -> Result<DemoSet> {
    if episodes == 0 {
        return Err(invalid("need at least one episode"));
    }
    let q = user.q(task_id)?;
    let mut set = DemoSet::new(task_id, seed, user.config_hash.clone());
    for k in 0..episodes {
        let mut rng = stream_rng(seed, &[task_id as u64, k as u64]);
        let (transitions, outcome, _) = rollout(env, task_id, &mut rng, |s, rng| {
            let q_s = q.q_values(s)?;
            let scaled: Vec<f64> = q_s.iter().map(|v| v * user.beta).collect();
            Ok(sample_index(&softmax(&scaled), rng))
        })?;
        set.episodes.push(Episode {
            index: k,
            outcome,
            transitions,
        });
    }
    Ok(set)
}

/// Visited `(s, a)` pairs of uniformly random rollouts in the real
/// environment, drawn over tasks round-robin.
pub fn sample_constraints(env: &dyn Environment, episodes: usize, seed: u64) -> Result<Vec<(State, usize)>> {
    if episodes == 0 {
        return Err(invalid("need at least one episode"));
    }
    let n_actions = env.action_count();
    let mut pairs = Vec::new();
    for k in 0..episodes {
        let task = k % env.task_count();
        let mut rng = stream_rng(seed, &[u64::MAX, k as u64]);
        let (transitions, _, _) = rollout(env, task, &mut rng, |_, rng| Ok(rng.gen_range(0..n_actions)))?;
        pairs.extend(transitions.into_iter().map(|t| (t.state, t.action)));
    }
    Ok(pairs)
}

/// Every non-sink grid cell with every action.
pub fn enumerate_grid_constraints(env: &GridWorld) -> Vec<(State, usize)> {
    (0..env.cell_count())
        .flat_map(|s| (0..GridWorld::ACTIONS).map(move |a| (State::Discrete(s), a)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_scramble, scrambled_dynamics, ScrambleMode};

    #[test]
    fn uncorrupted_grid_user_reaches_targets() {
        let env = GridWorld::default();
        let user = build_grid_user(&env, env.real_dynamics(), &[24], UserOptions::default()).unwrap();
        let demos = collect_demos(&user, &env, 24, 200, 5).unwrap();
        let wins = demos.episodes.iter().filter(|e| e.outcome == Outcome::Target).count();
        assert!(wins >= 180, "{wins}");
    }

    #[test]
    fn demos_store_real_next_states() {
        let env = GridWorld::default();
        let map = make_scramble(ScrambleMode::Global, 1, 49);
        let internal = DynamicsModel::Deterministic(scrambled_dynamics(&env.real_table(), &map).unwrap());
        let user = build_grid_user(&env, internal, &[10], UserOptions::default()).unwrap();
        let demos = collect_demos(&user, &env, 10, 50, 9).unwrap();
        for t in demos.transitions() {
            let s = t.state.index().unwrap();
            assert_eq!(t.next, State::Discrete(env.real_next(s, t.action)));
        }
        assert!(demos.episodes.iter().all(|e| e.len() <= env.max_steps));
    }

    #[test]
    fn collection_is_reproducible() {
        let env = GridWorld::default();
        let user = build_grid_user(&env, env.real_dynamics(), &[3], UserOptions::default()).unwrap();
        let a = format_demos(&[collect_demos(&user, &env, 3, 20, 77).unwrap()]);
        let b = format_demos(&[collect_demos(&user, &env, 3, 20, 77).unwrap()]);
        assert_eq!(a, b);
        let c = format_demos(&[collect_demos(&user, &env, 3, 20, 78).unwrap()]);
        assert_ne!(a, c);
    }

    #[test]
    fn grid_constraints_enumerate_every_pair() {
        assert_eq!(enumerate_grid_constraints(&GridWorld::default()).len(), 196);
    }

    #[test]
    fn random_rollout_constraints() {
        let env = PointMass2D::default();
        let pairs = sample_constraints(&env, 20, 3).unwrap();
        assert!(!pairs.is_empty());
        assert!(pairs.iter().all(|(s, a)| s.vector().is_some() && *a < 4));
    }

    #[test]
    fn sampling_follows_probabilities() {
        let mut rng = stream_rng(1, &[]);
        let probs = [0.1, 0.0, 0.6, 0.3];
        let mut counts = [0usize; 4];
        for _ in 0..20_000 {
            counts[sample_index(&probs, &mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        for i in [0, 2, 3] {
            assert!((counts[i] as f64 / 20_000.0 - probs[i]).abs() < 0.015);
        }
    }
}

//! Inverse soft Q-learning: fit per-task soft Q functions and one shared
//! internal dynamics model to demonstrations by minimising
//!
//! ```text
//! Σ_i Σ_{(s,a) ∈ demos_i} −log π_θi(a|s)  +  ρ/2 · Σ_i Σ_{s ∈ samples} Σ_a δ_{θi,φ}(s,a)²
//! ```

pub mod artifact;
pub mod continuous;
pub mod tabular;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{DeterministicTable, DynamicsModel, LinearDynamics, LINEAR_PARAM_NAMES};
use crate::numeric::StableSum;
use crate::simuser::DemoSet;
use crate::soft::{demo_negative_log_likelihood, soft_bellman_error, SoftQFunction, State, TaskSpec};

pub use artifact::{CurvePoint, TrainArtifact};
pub use continuous::{train_continuous, ContinuousProblem};
pub use tabular::{train_tabular, TabularProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsFamily {
    Tabular,
    Linear,
    CategoricalMixture,
    ActionIntent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IsqlConfig {
    pub rho: f64,
    pub iterations: usize,
    /// Demo transitions per task per iteration; 0 means full batch.
    pub demo_batch: usize,
    /// Constraint states per task per iteration; 0 means full batch.
    pub penalty_batch: usize,
    pub family: DynamicsFamily,
    pub theta_learning_rate: f64,
    pub phi_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Alternate blocks of θ-only and φ-only steps instead of joint steps.
    pub alternating: bool,
    pub alternate_block: usize,
    pub hidden_units: usize,
    pub seed: u64,
    /// Interval at which the dynamics error against a known truth is logged.
    pub log_every: usize,
}

impl Default for IsqlConfig {
    fn default() -> Self {
        Self {
            rho: 2e-3,
            iterations: 20_000,
            demo_batch: 0,
            penalty_batch: 0,
            family: DynamicsFamily::Tabular,
            theta_learning_rate: 0.05,
            phi_learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            alternating: false,
            alternate_block: 50,
            hidden_units: 32,
            seed: 0,
            log_every: 100,
        }
    }
}

impl IsqlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("rho must be non-negative, got {}", self.rho)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if !(self.theta_learning_rate > 0.0 && self.phi_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::Config("bad Adam hyperparameters".into()));
        }
        if self.alternating && self.alternate_block == 0 {
            return Err(Error::Config("alternate_block must be positive".into()));
        }
        if self.hidden_units == 0 || self.log_every == 0 {
            return Err(Error::Config("hidden_units and log_every must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn adam(&self, learning_rate: f64) -> crate::models::AdamConfig {
        crate::models::AdamConfig {
            learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    /// Which parameter blocks move at `iteration`: `(theta, phi)`.
    pub(crate) fn schedule(&self, iteration: usize) -> (bool, bool) {
        if !self.alternating {
            return (true, true);
        }
        let theta_turn = (iteration / self.alternate_block) % 2 == 0;
        (theta_turn, !theta_turn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyCost {
    pub total: f64,
    pub nll: f64,
    pub penalty: f64,
}

/// Distinct constraint states of a sampled `(s, a)` set, in first-seen
/// order.
pub fn constraint_states(pairs: &[(State, usize)]) -> Vec<State> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (s, _) in pairs {
        if seen.insert(state_key(s)) {
            out.push(*s);
        }
    }
    out
}

/// Distinct `(s, a)` constraint pairs in first-seen order.
pub fn constraint_pairs(pairs: &[(State, usize)]) -> Vec<(State, usize)> {
    let mut seen = HashSet::new();
    pairs.iter().filter(|(s, a)| seen.insert((state_key(s), *a))).copied().collect()
}

fn state_key(s: &State) -> Vec<u64> {
    match s {
        State::Discrete(i) => vec![*i as u64],
        State::Continuous(v) => v.iter().map(|x| x.to_bits()).collect(),
    }
}

/// Reference evaluation of the penalised objective straight from the
/// soft Bellman definitions. `thetas`, `demos` and `tasks` are aligned by
/// position and must agree on task ids. Constraint pairs at states that
/// are terminal for a task carry no constraint for it: the absorbing value
/// is pinned, not learned.
pub fn penalty_cost(
    thetas: &[&dyn SoftQFunction],
    phi: &DynamicsModel,
    demos: &[DemoSet],
    constraints: &[(State, usize)],
    tasks: &[TaskSpec],
    rho: f64,
) -> Result<PenaltyCost> {
    if thetas.len() != tasks.len() || demos.len() != tasks.len() {
        return Err(Error::Config("thetas, demos and tasks must be aligned".into()));
    }
    if let Some((d, t)) = demos.iter().zip(tasks).find(|(d, t)| d.task_id != t.task_id) {
        return Err(Error::Config(format!(
            "demo set for task {} aligned with task {}",
            d.task_id, t.task_id
        )));
    }
    if constraints.is_empty() {
        return Err(invalid("no constraint samples"));
    }
    let mut nll = StableSum::new();
    let mut penalty = StableSum::new();
    for ((q, d), task) in thetas.iter().zip(demos).zip(tasks) {
        nll.add(demo_negative_log_likelihood(*q, d)?.value);
        for (s, a) in constraints.iter().filter(|(s, _)| !task.is_terminal(s)) {
            let delta = soft_bellman_error(*q, phi, task, s, *a)?;
            penalty.add(delta * delta);
        }
    }
    let (nll, penalty) = (nll.value(), 0.5 * rho * penalty.value());
    Ok(PenaltyCost {
        total: nll + penalty,
        nll,
        penalty,
    })
}

/// Fraction of `(s, a)` pairs whose most likely next state under `phi` is
/// the true next state. A tie for the maximum counts as a miss.
pub fn evaluate_dynamics_accuracy(phi: &DynamicsModel, truth: &DeterministicTable) -> Result<f64> {
    let mut hits = 0usize;
    for s in 0..truth.source_count {
        for a in 0..truth.action_count {
            let dist = phi.distribution(s, a, truth.state_count)?;
            let target = truth.next_state(s, a);
            let best = dist[target];
            let unique = dist.iter().enumerate().all(|(j, p)| j == target || *p < best);
            if unique {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (truth.source_count * truth.action_count) as f64)
}

/// Fraction of `(s, a)` pairs whose next-state distribution under `phi`
/// puts no more than `tol` mass outside the states `real` reaches from `s`
/// in one step under any action.
pub fn support_within_reachability(phi: &DynamicsModel, real: &DeterministicTable, tol: f64) -> Result<f64> {
    let mut inside = 0usize;
    for s in 0..real.source_count {
        let reachable: HashSet<usize> = (0..real.action_count).map(|a| real.next_state(s, a)).collect();
        for a in 0..real.action_count {
            let dist = phi.distribution(s, a, real.state_count)?;
            let outside: f64 = dist
                .iter()
                .enumerate()
                .filter(|(j, _)| !reachable.contains(j))
                .map(|(_, p)| p)
                .sum();
            if outside <= tol {
                inside += 1;
            }
        }
    }
    Ok(inside as f64 / (real.source_count * real.action_count) as f64)
}

/// Per-parameter absolute errors and the L2 error of a linear model.
pub fn linear_parameter_error(phi: &LinearDynamics, truth: &LinearDynamics) -> (Vec<(&'static str, f64)>, f64) {
    let per = LINEAR_PARAM_NAMES
        .iter()
        .zip(phi.params.iter().zip(&truth.params))
        .map(|(n, (a, b))| (*n, (a - b).abs()))
        .collect();
    (per, phi.l2_distance(truth))
}

/// Best accuracy any single state-independent action permutation of the
/// real dynamics achieves against `truth`.
pub fn global_permutation_ceiling(real: &DeterministicTable, truth: &DeterministicTable) -> Result<f64> {
    let mut best = 0.0f64;
    for perm in permutations4() {
        let map = crate::envs::ScrambleMap {
            mode: crate::envs::ScrambleMode::Global,
            perms: vec![perm],
            seed: 0,
        };
        let candidate = crate::envs::scrambled_dynamics(real, &map)?;
        best = best.max(evaluate_dynamics_accuracy(&DynamicsModel::Deterministic(candidate), truth)?);
    }
    Ok(best)
}

pub(crate) fn permutations4() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    if (0..4).all(|k| p.contains(&k)) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

/// Dynamics error reported while training against a known truth.
#[derive(Debug, Clone)]
pub enum Truth {
    /// Argmax next-state accuracy against a deterministic table.
    Table(DeterministicTable),
    /// L2 parameter error against a linear model.
    Linear(LinearDynamics),
    /// Weight of one mixture candidate.
    Candidate(usize),
}

impl Truth {
    pub fn measure(&self, phi: &DynamicsModel) -> Result<f64> {
        match (self, phi) {
            (Truth::Table(t), _) => evaluate_dynamics_accuracy(phi, t),
            (Truth::Linear(t), DynamicsModel::Linear(l)) => Ok(l.l2_distance(t)),
            (Truth::Candidate(k), DynamicsModel::Mixture(m)) => m
                .weights()
                .get(*k)
                .copied()
                .ok_or_else(|| invalid("candidate index out of range")),
            _ => Err(invalid(format!("cannot compare {} dynamics to this truth", phi.family()))),
        }
    }
}

//! Soft Bellman machinery: Boltzmann policies, soft values, the soft Bellman
//! error, and exact tabular soft value iteration.
//!
//! Terminal states behave as a zero-reward absorbing state in which every
//! action loops back. Their soft value is therefore pinned at
//! `ln|A| / (1 − γ)` (zero when `γ = 1`), and `Q(terminal, a) = γ·V(terminal)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::numeric::{log_sum_exp, softmax_into, StableSum};
use crate::simuser::DemoSet;

/// Continuous point-mass state `(x, y, v_x, v_y)`.
pub type StateVec = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum State {
    Discrete(usize),
    Continuous(StateVec),
}

impl State {
    pub fn index(&self) -> Option<usize> {
        match self {
            State::Discrete(i) => Some(*i),
            State::Continuous(_) => None,
        }
    }

    pub fn vector(&self) -> Option<&StateVec> {
        match self {
            State::Continuous(v) => Some(v),
            State::Discrete(_) => None,
        }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            State::Discrete(i) => write!(f, "{i}"),
            State::Continuous(v) => write!(f, "({}, {}, {}, {})", v[0], v[1], v[2], v[3]),
        }
    }
}

/// Known task reward `R(s, a, s')` plus the task's terminal set.
pub trait Reward: Send + Sync {
    fn reward(&self, s: &State, a: usize, next: &State) -> f64;

    fn is_terminal(&self, _s: &State) -> bool {
        false
    }
}

/// Reward and termination given as closures; handy for tests and small MDPs.
pub struct FnReward<R, T> {
    pub reward: R,
    pub terminal: T,
}

impl<R, T> Reward for FnReward<R, T>
where
    R: Fn(&State, usize, &State) -> f64 + Send + Sync,
    T: Fn(&State) -> bool + Send + Sync,
{
    fn reward(&self, s: &State, a: usize, next: &State) -> f64 {
        (self.reward)(s, a, next)
    }

    fn is_terminal(&self, s: &State) -> bool {
        (self.terminal)(s)
    }
}

#[derive(Clone)]
pub struct TaskSpec {
    pub task_id: usize,
    pub reward: Arc<dyn Reward>,
    pub discount: f64,
    pub action_count: usize,
}

impl TaskSpec {
    pub fn new(task_id: usize, reward: Arc<dyn Reward>, discount: f64, action_count: usize) -> Result<Self> {
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(invalid(format!("discount {discount} outside (0, 1]")));
        }
        if action_count < 2 {
            return Err(invalid(format!("action_count {action_count} < 2")));
        }
        Ok(Self {
            task_id,
            reward,
            discount,
            action_count,
        })
    }

    pub fn reward(&self, s: &State, a: usize, next: &State) -> f64 {
        self.reward.reward(s, a, next)
    }

    pub fn is_terminal(&self, s: &State) -> bool {
        self.reward.is_terminal(s)
    }

    pub fn terminal_value(&self) -> f64 {
        terminal_value(self.action_count, self.discount)
    }
}

/// Soft value of the absorbing terminal state.
pub fn terminal_value(action_count: usize, discount: f64) -> f64 {
    if discount < 1.0 {
        (action_count as f64).ln() / (1.0 - discount)
    } else {
        0.0
    }
}

impl fmt::Debug for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaskSpec")
            .field("task_id", &self.task_id)
            .field("discount", &self.discount)
            .field("action_count", &self.action_count)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn prob(&self, a: usize) -> f64 {
        self.probs[a]
    }
}

fn check_finite(q: &[f64]) -> Result<()> {
    if q.is_empty() {
        return Err(invalid("empty Q vector"));
    }
    if let Some(bad) = q.iter().find(|v| !v.is_finite()) {
        return Err(invalid(format!("non-finite Q value {bad}")));
    }
    Ok(())
}

/// Boltzmann policy `π(a|s) ∝ exp Q(s, a)`.
pub fn policy_from_q(q_values: &[f64]) -> Result<ActionDistribution> {
    check_finite(q_values)?;
    let mut probs = vec![0.0; q_values.len()];
    softmax_into(q_values, &mut probs);
    Ok(ActionDistribution { probs })
}

/// Soft value `V(s) = log Σ_a exp Q(s, a)`.
pub fn soft_value(q_values: &[f64]) -> Result<f64> {
    check_finite(q_values)?;
    Ok(log_sum_exp(q_values))
}

/// Anything that yields per-action soft Q values at a state.
pub trait SoftQFunction {
    fn q_values(&self, s: &State) -> Result<Vec<f64>>;
}

/// Next-state law of a dynamics model at one `(s, a)`: weighted outcomes.
pub trait TransitionModel {
    fn predict(&self, s: &State, a: usize) -> Result<Vec<(State, f64)>>;
}

/// Soft Bellman error `Q(s,a) − E_{s'}[R(s,a,s') + γ V(s')]`, with `V` at
/// terminal states pinned to [`terminal_value`]. At a terminal `s` the only
/// continuation is the absorbing loop, so the error is `Q(s,a) − γ·V_term`.
pub fn soft_bellman_error(
    q: &dyn SoftQFunction,
    dynamics: &dyn TransitionModel,
    task: &TaskSpec,
    s: &State,
    a: usize,
) -> Result<f64> {
    if a >= task.action_count {
        return Err(invalid(format!("action {a} out of range")));
    }
    let q_s = q.q_values(s)?;
    if q_s.len() != task.action_count {
        return Err(invalid("Q arity does not match the task"));
    }
    let v_term = task.terminal_value();
    if task.is_terminal(s) {
        return Ok(q_s[a] - task.discount * v_term);
    }
    let outcomes = dynamics.predict(s, a)?;
    let total: f64 = outcomes.iter().map(|(_, p)| p).sum();
    if (total - 1.0).abs() > 1e-9 || outcomes.iter().any(|(_, p)| *p < 0.0) {
        return Err(Error::InvariantViolation(format!(
            "next-state distribution at ({s}, {a}) sums to {total}"
        )));
    }
    let mut expectation = StableSum::new();
    for (next, p) in &outcomes {
        if *p == 0.0 {
            continue;
        }
        let r = task.reward(s, a, next);
        let v = if task.is_terminal(next) {
            v_term
        } else {
            soft_value(&q.q_values(next)?)?
        };
        expectation.add(p * (r + task.discount * v));
    }
    Ok(q_s[a] - expectation.value())
}

/// Dense `[state × action]` soft Q table.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularSoftQ {
    pub state_count: usize,
    pub action_count: usize,
    pub values: Vec<f64>,
}

impl TabularSoftQ {
    pub fn zeros(state_count: usize, action_count: usize) -> Self {
        Self {
            state_count,
            action_count,
            values: vec![0.0; state_count * action_count],
        }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.action_count..(s + 1) * self.action_count]
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.action_count + a]
    }
}

impl SoftQFunction for TabularSoftQ {
    fn q_values(&self, s: &State) -> Result<Vec<f64>> {
        match s {
            State::Discrete(i) if *i < self.state_count => Ok(self.row(*i).to_vec()),
            _ => Err(invalid(format!("state {s} outside the Q table"))),
        }
    }
}

/// Finite MDP with dense `[s × a × s']` transition and reward tensors.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub state_count: usize,
    pub action_count: usize,
    pub transitions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminal: Vec<bool>,
    pub discount: f64,
}

impl TabularMdp {
    pub fn new(
        state_count: usize,
        action_count: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        terminal: Vec<bool>,
        discount: f64,
    ) -> Result<Self> {
        let n = state_count * action_count * state_count;
        if transitions.len() != n || rewards.len() != n || terminal.len() != state_count {
            return Err(invalid("tabular MDP tensor shapes disagree"));
        }
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(invalid(format!("discount {discount} outside (0, 1]")));
        }
        for sa in 0..state_count * action_count {
            let row = &transitions[sa * state_count..(sa + 1) * state_count];
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < 0.0) {
                return Err(Error::InvariantViolation(format!(
                    "transition row {sa} sums to {total}"
                )));
            }
        }
        Ok(Self {
            state_count,
            action_count,
            transitions,
            rewards,
            terminal,
            discount,
        })
    }

    /// Builds the tensors by querying a transition model and a task over
    /// discrete states `0..state_count`.
    pub fn from_models(state_count: usize, dynamics: &dyn TransitionModel, task: &TaskSpec) -> Result<Self> {
        let a_n = task.action_count;
        let mut transitions = vec![0.0; state_count * a_n * state_count];
        let mut rewards = vec![0.0; state_count * a_n * state_count];
        let mut terminal = vec![false; state_count];
        for s in 0..state_count {
            let st = State::Discrete(s);
            terminal[s] = task.is_terminal(&st);
            for a in 0..a_n {
                let base = (s * a_n + a) * state_count;
                if terminal[s] {
                    transitions[base + s] = 1.0;
                    continue;
                }
                for (next, p) in dynamics.predict(&st, a)? {
                    let j = next
                        .index()
                        .filter(|j| *j < state_count)
                        .ok_or_else(|| invalid(format!("next state {next} outside 0..{state_count}")))?;
                    transitions[base + j] += p;
                }
                for j in 0..state_count {
                    rewards[base + j] = task.reward(&st, a, &State::Discrete(j));
                }
            }
        }
        Self::new(state_count, a_n, transitions, rewards, terminal, task.discount)
    }

    fn backup(&self, values: &[f64], s: usize, a: usize) -> f64 {
        let n = self.state_count;
        let base = (s * self.action_count + a) * n;
        let mut acc = StableSum::new();
        for j in 0..n {
            let p = self.transitions[base + j];
            if p != 0.0 {
                acc.add(p * (self.rewards[base + j] + self.discount * values[j]));
            }
        }
        acc.value()
    }

    /// One Bellman backup of `q`, returning the new table.
    pub fn bellman_backup(&self, q: &TabularSoftQ) -> TabularSoftQ {
        let values = self.soft_values(q);
        let mut out = TabularSoftQ::zeros(self.state_count, self.action_count);
        let looped = self.discount * self.terminal_value();
        for s in 0..self.state_count {
            if self.terminal[s] {
                out.values[s * self.action_count..(s + 1) * self.action_count].fill(looped);
                continue;
            }
            for a in 0..self.action_count {
                out.values[s * self.action_count + a] = self.backup(&values, s, a);
            }
        }
        out
    }

    pub fn terminal_value(&self) -> f64 {
        terminal_value(self.action_count, self.discount)
    }

    /// Soft values with terminal states pinned at [`terminal_value`].
    pub fn soft_values(&self, q: &TabularSoftQ) -> Vec<f64> {
        let v_term = self.terminal_value();
        (0..self.state_count)
            .map(|s| if self.terminal[s] { v_term } else { log_sum_exp(q.row(s)) })
            .collect()
    }

    /// Sup-norm of `T(q) − q` over all state-action pairs.
    pub fn residual(&self, q: &TabularSoftQ) -> f64 {
        let next = self.bellman_backup(q);
        next.values
            .iter()
            .zip(&q.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Jacobi soft value iteration from `Q = 0`. Stops once successive iterates
/// differ by at most `tol` in sup-norm, so the returned table has Bellman
/// residual at most `γ·tol`.
pub fn soft_value_iteration(mdp: &TabularMdp, tol: f64, max_iters: usize) -> Result<TabularSoftQ> {
    if mdp.discount >= 1.0 && mdp.terminal.iter().all(|t| !t) {
        return Err(invalid("undiscounted MDP without terminal states"));
    }
    let mut q = TabularSoftQ::zeros(mdp.state_count, mdp.action_count);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let next = mdp.bellman_backup(&q);
        residual = next
            .values
            .iter()
            .zip(&q.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if !residual.is_finite() {
            break;
        }
        q = next;
        if residual <= tol {
            return Ok(q);
        }
    }
    Err(Error::Convergence {
        iterations: max_iters,
        residual,
    })
}

/// Result of [`demo_negative_log_likelihood`]; `empty` flags a demo set
/// without transitions (the value is then zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nll {
    pub value: f64,
    pub empty: bool,
}

/// `Σ_{(s,a)} −log π(a|s)` over every transition of the demo set.
pub fn demo_negative_log_likelihood(q: &dyn SoftQFunction, demos: &DemoSet) -> Result<Nll> {
    let mut acc = StableSum::new();
    let mut count = 0usize;
    for t in demos.transitions() {
        let q_s = q.q_values(&t.state)?;
        if t.action >= q_s.len() {
            return Err(invalid(format!("demo action {} out of range", t.action)));
        }
        check_finite(&q_s)?;
        acc.add(log_sum_exp(&q_s) - q_s[t.action]);
        count += 1;
    }
    Ok(Nll {
        value: acc.value(),
        empty: count == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_q_gives_uniform_policy() {
        let pi = policy_from_q(&[1.0; 4]).unwrap();
        for p in pi.probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn analytic_softmax() {
        let pi = policy_from_q(&[2f64.ln(), 0.0]).unwrap();
        assert!((pi.probs[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((pi.probs[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn large_q_does_not_overflow() {
        let pi = policy_from_q(&[1000.0, 999.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((pi.probs[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((pi.probs[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_q_is_rejected() {
        assert!(matches!(policy_from_q(&[1.0, f64::NAN]), Err(Error::InvalidInput(_))));
        assert!(matches!(soft_value(&[f64::INFINITY]), Err(Error::InvalidInput(_))));
        assert!(policy_from_q(&[]).is_err());
    }

    #[test]
    fn soft_value_examples() {
        assert!((soft_value(&[0.0, 0.0]).unwrap() - 0.693_147_180_559_945_3).abs() < 1e-15);
        assert_eq!(soft_value(&[-3.25]).unwrap(), -3.25);
        assert!((soft_value(&[5.0; 3]).unwrap() - (5.0 + 3f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn single_state_geometric_series() {
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![1.0], vec![false], 0.5).unwrap();
        let q = soft_value_iteration(&mdp, 1e-12, 10_000).unwrap();
        assert!((q.values[0] - 2.0).abs() < 1e-11);
    }

    #[test]
    fn non_convergence_reports_residual() {
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![1.0], vec![false], 0.999).unwrap();
        match soft_value_iteration(&mdp, 1e-12, 5) {
            Err(Error::Convergence { iterations, residual }) => {
                assert_eq!(iterations, 5);
                assert!(residual > 0.9);
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn unnormalised_rows_are_rejected() {
        let err = TabularMdp::new(1, 2, vec![1.0, 0.5], vec![0.0, 0.0], vec![false], 0.9).unwrap_err();
        assert!(matches!(err, Error::InvariantViolation(_)));
    }

    proptest! {
        #[test]
        fn policy_is_normalised_and_shift_invariant(
            q in prop::collection::vec(-1e6f64..1e6, 1..8),
            shift in -1e3f64..1e3,
        ) {
            let pi = policy_from_q(&q).unwrap();
            prop_assert!((pi.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = q.iter().map(|v| v + shift).collect();
            let pi2 = policy_from_q(&shifted).unwrap();
            for (a, b) in pi.probs.iter().zip(&pi2.probs) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn soft_value_bounds(q in prop::collection::vec(-50f64..50.0, 1..8)) {
            let v = soft_value(&q).unwrap();
            let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= max - 1e-12);
            prop_assert!(v <= max + (q.len() as f64).ln() + 1e-12);
        }
    }
}

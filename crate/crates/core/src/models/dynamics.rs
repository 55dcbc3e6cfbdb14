//! Internal and real dynamics representations.

use crate::error::{invalid, Result};
use crate::numeric::{sigmoid, softmax, softmax_backward, softmax_into};
use crate::soft::{State, StateVec, TransitionModel};

/// Control vectors of the point-mass action set, indexed like the grid
/// actions: up, down, left, right.
pub const CONTROLS: [[f64; 2]; 4] = [[0.0, 0.01], [0.0, -0.01], [-0.01, 0.0], [0.01, 0.0]];

/// Exact deterministic finite map `next[s][a]`. Source states are
/// `0..source_count`; next states range over `0..state_count`, which may
/// include sink states that are never sources.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicTable {
    pub source_count: usize,
    pub state_count: usize,
    pub action_count: usize,
    pub next: Vec<usize>,
}

impl DeterministicTable {
    pub fn new(source_count: usize, state_count: usize, action_count: usize, next: Vec<usize>) -> Result<Self> {
        if next.len() != source_count * action_count {
            return Err(invalid("deterministic table has the wrong length"));
        }
        if let Some(bad) = next.iter().find(|n| **n >= state_count) {
            return Err(invalid(format!("next state {bad} outside 0..{state_count}")));
        }
        Ok(Self {
            source_count,
            state_count,
            action_count,
            next,
        })
    }

    pub fn next_state(&self, s: usize, a: usize) -> usize {
        self.next[s * self.action_count + a]
    }
}

/// Free tabular dynamics: a softmax over next states for every `(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDynamics {
    pub source_count: usize,
    pub action_count: usize,
    pub state_count: usize,
    /// `[source × action × next]`
    pub logits: Vec<f64>,
}

impl TabularDynamics {
    pub fn uniform(source_count: usize, action_count: usize, state_count: usize) -> Self {
        Self {
            source_count,
            action_count,
            state_count,
            logits: vec![0.0; source_count * action_count * state_count],
        }
    }

    pub fn logits_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.action_count + a) * self.state_count;
        &self.logits[base..base + self.state_count]
    }

    pub fn probs(&self, s: usize, a: usize) -> Vec<f64> {
        softmax(self.logits_row(s, a))
    }

    /// All `[source × action × next]` probabilities at once.
    pub fn prob_tensor(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.logits.len()];
        for (row, o) in self.logits.chunks(self.state_count).zip(out.chunks_mut(self.state_count)) {
            softmax_into(row, o);
        }
        out
    }
}

/// Names of the eight free entries of the linear point-mass model, in
/// parameter order.
pub const LINEAR_PARAM_NAMES: [&str; 8] = ["a13", "a24", "a33", "a44", "b11", "b22", "b31", "b42"];

/// `x' = A x + B u` with the point-mass sparsity pattern:
///
/// ```text
///     | 1 0 a13 0   |       | b11 0   |
/// A = | 0 1 0   a24 |   B = | 0   b22 |
///     | 0 0 a33 0   |       | b31 0   |
///     | 0 0 0   a44 |       | 0   b42 |
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDynamics {
    /// `[a13, a24, a33, a44, b11, b22, b31, b42]`, each in `[0, 1]`.
    pub params: [f64; 8],
}

impl LinearDynamics {
    pub fn new(params: [f64; 8]) -> Result<Self> {
        if params.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid(format!("linear dynamics parameters {params:?} outside [0, 1]")));
        }
        Ok(Self { params })
    }

    /// Simulator physics: acceleration control with inertia.
    pub fn real() -> Self {
        Self {
            params: [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0],
        }
    }

    /// Sigmoid reparameterisation of unconstrained latents.
    pub fn from_latents(latents: &[f64; 8]) -> Self {
        let mut params = [0.0; 8];
        for (p, l) in params.iter_mut().zip(latents) {
            *p = sigmoid(*l);
        }
        Self { params }
    }

    pub fn a_matrix(&self) -> [[f64; 4]; 4] {
        let [a13, a24, a33, a44, ..] = self.params;
        [
            [1.0, 0.0, a13, 0.0],
            [0.0, 1.0, 0.0, a24],
            [0.0, 0.0, a33, 0.0],
            [0.0, 0.0, 0.0, a44],
        ]
    }

    pub fn b_matrix(&self) -> [[f64; 2]; 4] {
        let [.., b11, b22, b31, b42] = self.params;
        [[b11, 0.0], [0.0, b22], [b31, 0.0], [0.0, b42]]
    }

    pub fn step(&self, x: &StateVec, a: usize) -> StateVec {
        let [a13, a24, a33, a44, b11, b22, b31, b42] = self.params;
        let [ux, uy] = CONTROLS[a];
        [
            x[0] + a13 * x[2] + b11 * ux,
            x[1] + a24 * x[3] + b22 * uy,
            a33 * x[2] + b31 * ux,
            a44 * x[3] + b42 * uy,
        ]
    }

    /// `∂x'/∂params`: parameter `k` only touches component `(k % 4)`, with
    /// the coefficient returned at index `k`.
    pub fn param_jacobian(x: &StateVec, a: usize) -> [f64; 8] {
        let [ux, uy] = CONTROLS[a];
        [x[2], x[3], x[2], x[3], ux, uy, ux, uy]
    }

    pub fn l2_distance(&self, other: &LinearDynamics) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// A categorical distribution over frozen candidate dynamics, each a
/// black-box deterministic step function.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalMixtureDynamics {
    pub candidates: Vec<LinearDynamics>,
    pub logits: Vec<f64>,
}

impl CategoricalMixtureDynamics {
    pub fn new(candidates: Vec<LinearDynamics>, logits: Vec<f64>) -> Result<Self> {
        if candidates.is_empty() || candidates.len() != logits.len() {
            return Err(invalid("mixture needs one logit per candidate"));
        }
        Ok(Self { candidates, logits })
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

/// Intended-action model `f(a_int | s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub enum IntentModel {
    /// `[source × action × intended]` logits.
    Tabular {
        source_count: usize,
        action_count: usize,
        logits: Vec<f64>,
    },
    /// Per user action, a linear softmax over intended actions of the
    /// (continuous) state: weights `[action × intended × 5]` (4 inputs + bias).
    Perceptron { action_count: usize, weights: Vec<f64> },
}

pub const PERCEPTRON_INPUTS: usize = 5;

impl IntentModel {
    pub fn tabular_identity(source_count: usize, action_count: usize, confidence: f64) -> Self {
        let mut logits = vec![0.0; source_count * action_count * action_count];
        for s in 0..source_count {
            for a in 0..action_count {
                logits[(s * action_count + a) * action_count + a] = confidence;
            }
        }
        IntentModel::Tabular {
            source_count,
            action_count,
            logits,
        }
    }

    pub fn action_count(&self) -> usize {
        match self {
            IntentModel::Tabular { action_count, .. } | IntentModel::Perceptron { action_count, .. } => *action_count,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            IntentModel::Tabular { logits, .. } => logits,
            IntentModel::Perceptron { weights, .. } => weights,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            IntentModel::Tabular { logits, .. } => logits,
            IntentModel::Perceptron { weights, .. } => weights,
        }
    }

    pub fn logits(&self, s: &State, a: usize) -> Result<Vec<f64>> {
        match (self, s) {
            (
                IntentModel::Tabular {
                    source_count,
                    action_count,
                    logits,
                },
                State::Discrete(i),
            ) if *i < *source_count && a < *action_count => {
                let base = (i * action_count + a) * action_count;
                Ok(logits[base..base + action_count].to_vec())
            }
            (IntentModel::Perceptron { action_count, weights }, State::Continuous(x)) if a < *action_count => {
                Ok((0..*action_count)
                    .map(|k| {
                        let w = &weights[(a * action_count + k) * PERCEPTRON_INPUTS..][..PERCEPTRON_INPUTS];
                        w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + w[3] * x[3] + w[4]
                    })
                    .collect())
            }
            _ => Err(invalid(format!("intent model not defined at ({s}, {a})"))),
        }
    }

    pub fn probs(&self, s: &State, a: usize) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(s, a)?))
    }
}

/// `T_φ(s'|s,a) = Σ_{a_int} T_real(s'|s,a_int) f_φ(a_int|s,a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionIntentDynamics {
    pub intent: IntentModel,
    pub real: Box<DynamicsModel>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DynamicsModel {
    Deterministic(DeterministicTable),
    Tabular(TabularDynamics),
    Linear(LinearDynamics),
    Mixture(CategoricalMixtureDynamics),
    ActionIntent(ActionIntentDynamics),
}

impl DynamicsModel {
    pub fn family(&self) -> &'static str {
        match self {
            DynamicsModel::Deterministic(_) => "deterministic",
            DynamicsModel::Tabular(_) => "tabular",
            DynamicsModel::Linear(_) => "linear",
            DynamicsModel::Mixture(_) => "categorical_mixture",
            DynamicsModel::ActionIntent(_) => "action_intent",
        }
    }

    pub fn action_count(&self) -> usize {
        match self {
            DynamicsModel::Deterministic(d) => d.action_count,
            DynamicsModel::Tabular(t) => t.action_count,
            DynamicsModel::Linear(_) | DynamicsModel::Mixture(_) => CONTROLS.len(),
            DynamicsModel::ActionIntent(m) => m.intent.action_count(),
        }
    }

    /// Dense next-state distribution for discrete models over `0..state_count`.
    pub fn distribution(&self, s: usize, a: usize, state_count: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; state_count];
        for (next, p) in self.predict(&State::Discrete(s), a)? {
            let j = next
                .index()
                .filter(|j| *j < state_count)
                .ok_or_else(|| invalid(format!("next state {next} outside 0..{state_count}")))?;
            out[j] += p;
        }
        Ok(out)
    }
}

fn merge_outcome(out: &mut Vec<(State, f64)>, next: State, p: f64) {
    if let State::Discrete(j) = next {
        if let Some(entry) = out.iter_mut().find(|(s, _)| *s == State::Discrete(j)) {
            entry.1 += p;
            return;
        }
    }
    out.push((next, p));
}

impl TransitionModel for DynamicsModel {
    fn predict(&self, s: &State, a: usize) -> Result<Vec<(State, f64)>> {
        if a >= self.action_count() {
            return Err(invalid(format!("action {a} out of range")));
        }
        match (self, s) {
            (DynamicsModel::Deterministic(d), State::Discrete(i)) if *i < d.source_count => {
                Ok(vec![(State::Discrete(d.next_state(*i, a)), 1.0)])
            }
            (DynamicsModel::Tabular(t), State::Discrete(i)) if *i < t.source_count => Ok(t
                .probs(*i, a)
                .into_iter()
                .enumerate()
                .map(|(j, p)| (State::Discrete(j), p))
                .collect()),
            (DynamicsModel::Linear(l), State::Continuous(x)) => Ok(vec![(State::Continuous(l.step(x, a)), 1.0)]),
            (DynamicsModel::Mixture(m), State::Continuous(x)) => Ok(m
                .candidates
                .iter()
                .zip(m.weights())
                .map(|(c, w)| (State::Continuous(c.step(x, a)), w))
                .collect()),
            (DynamicsModel::ActionIntent(m), _) => {
                let f = m.intent.probs(s, a)?;
                let mut out = Vec::new();
                for (a_int, w) in f.into_iter().enumerate() {
                    for (next, p) in m.real.predict(s, a_int)? {
                        merge_outcome(&mut out, next, w * p);
                    }
                }
                Ok(out)
            }
            _ => Err(invalid(format!("{} dynamics not defined at state {s}", self.family()))),
        }
    }
}

/// Reverse-mode pieces for each learnable family: given the gradient of a
/// loss with respect to a model's output, accumulate the gradient with
/// respect to its free parameters.
impl TabularDynamics {
    pub fn backward_row(&self, s: usize, a: usize, probs: &[f64], grad_probs: &[f64], grad_logits: &mut [f64]) {
        let base = (s * self.action_count + a) * self.state_count;
        softmax_backward(probs, grad_probs, &mut grad_logits[base..base + self.state_count]);
    }
}

impl LinearDynamics {
    /// `∂L/∂latents` for the sigmoid-parameterised model given `∂L/∂x'`.
    pub fn latent_gradient(&self, x: &StateVec, a: usize, grad_next: &StateVec) -> [f64; 8] {
        let jac = Self::param_jacobian(x, a);
        let mut out = [0.0; 8];
        for k in 0..8 {
            let p = self.params[k];
            out[k] = grad_next[k % 4] * jac[k] * p * (1.0 - p);
        }
        out
    }
}

impl CategoricalMixtureDynamics {
    /// `∂L/∂logits` given `∂L/∂weights`.
    pub fn logit_gradient(&self, grad_weights: &[f64]) -> Vec<f64> {
        let w = self.weights();
        let mut out = vec![0.0; w.len()];
        softmax_backward(&w, grad_weights, &mut out);
        out
    }
}

impl IntentModel {
    /// Accumulates `∂L/∂params` given `∂L/∂f(·|s,a)`.
    pub fn backward(&self, s: &State, a: usize, grad_probs: &[f64], grad_params: &mut [f64]) -> Result<()> {
        let probs = self.probs(s, a)?;
        let mut grad_logits = vec![0.0; probs.len()];
        softmax_backward(&probs, grad_probs, &mut grad_logits);
        match (self, s) {
            (IntentModel::Tabular { action_count, .. }, State::Discrete(i)) => {
                let base = (i * action_count + a) * action_count;
                for (k, g) in grad_logits.iter().enumerate() {
                    grad_params[base + k] += g;
                }
            }
            (IntentModel::Perceptron { action_count, .. }, State::Continuous(x)) => {
                for (k, g) in grad_logits.iter().enumerate() {
                    let base = (a * action_count + k) * PERCEPTRON_INPUTS;
                    for d in 0..4 {
                        grad_params[base + d] += g * x[d];
                    }
                    grad_params[base + 4] += g;
                }
            }
            _ => return Err(invalid(format!("intent model not defined at ({s}, {a})"))),
        }
        Ok(())
    }
}

//! Continuous 2D point-mass navigation with linear dynamics.

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Environment, Outcome, StepResult};
use crate::models::{DynamicsModel, LinearDynamics};
use crate::soft::{Reward, State, StateVec, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointMassRewards {
    pub step_cost: f64,
    pub target_bonus: f64,
    pub out_of_bounds_penalty: f64,
}

impl Default for PointMassRewards {
    fn default() -> Self {
        Self {
            step_cost: -1.0,
            target_bonus: 100.0,
            out_of_bounds_penalty: -100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointMass2D {
    pub target_radius: f64,
    pub max_steps: usize,
    pub discount: f64,
    /// Targets sit on a `lattice × lattice` grid at `(i + 1) / (lattice + 1)`.
    pub lattice: usize,
    pub rewards: PointMassRewards,
}

impl Default for PointMass2D {
    fn default() -> Self {
        Self {
            target_radius: 0.02,
            max_steps: 200,
            discount: 0.99,
            lattice: 7,
            rewards: PointMassRewards::default(),
        }
    }
}

pub fn out_of_bounds(x: &StateVec) -> bool {
    !(0.0..=1.0).contains(&x[0]) || !(0.0..=1.0).contains(&x[1])
}

impl PointMass2D {
    pub const ACTIONS: usize = 4;

    pub fn target(&self, task_id: usize) -> [f64; 2] {
        assert!(task_id < self.lattice * self.lattice, "task {task_id} out of range");
        let step = 1.0 / (self.lattice + 1) as f64;
        let (i, j) = (task_id % self.lattice, task_id / self.lattice);
        [(i + 1) as f64 * step, (j + 1) as f64 * step]
    }

    pub fn point_task(&self, task_id: usize) -> PointMassTask {
        PointMassTask {
            target: self.target(task_id),
            radius: self.target_radius,
            rewards: self.rewards,
        }
    }

    pub fn pointmass_step(&self, task_id: usize, x: &StateVec, a: usize, steps_taken: usize) -> StepResult {
        let next = LinearDynamics::real().step(x, a);
        let task = self.point_task(task_id);
        let reward = task.transition_reward(x, &next);
        let outcome = if task.at_target(&next) {
            Outcome::Target
        } else if out_of_bounds(&next) {
            Outcome::OutOfBounds
        } else if steps_taken + 1 >= self.max_steps {
            Outcome::Timeout
        } else {
            Outcome::Continue
        };
        StepResult {
            next: State::Continuous(next),
            reward,
            done: outcome.is_done(),
            outcome,
        }
    }

    /// `x0 ~ Unif(0,1)², v0 = 0`, redrawn if it lands inside the target.
    pub fn reset_state(&self, task_id: usize, rng: &mut dyn RngCore) -> StateVec {
        let task = self.point_task(task_id);
        loop {
            let x = [rng.gen::<f64>(), rng.gen::<f64>(), 0.0, 0.0];
            if !task.at_target(&x) {
                return x;
            }
        }
    }
}

/// Per-step cost, target bonus and out-of-bounds penalty; target region and
/// the outside of the unit square are terminal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMassTask {
    pub target: [f64; 2],
    pub radius: f64,
    pub rewards: PointMassRewards,
}

impl PointMassTask {
    pub fn at_target(&self, x: &StateVec) -> bool {
        let dx = x[0] - self.target[0];
        let dy = x[1] - self.target[1];
        dx * dx + dy * dy <= self.radius * self.radius
    }

    pub fn is_terminal_vec(&self, x: &StateVec) -> bool {
        self.at_target(x) || out_of_bounds(x)
    }

    pub fn transition_reward(&self, x: &StateVec, next: &StateVec) -> f64 {
        if self.is_terminal_vec(x) {
            return 0.0;
        }
        let mut r = self.rewards.step_cost;
        if self.at_target(next) {
            r += self.rewards.target_bonus;
        } else if out_of_bounds(next) {
            r += self.rewards.out_of_bounds_penalty;
        }
        r
    }
}

impl Reward for PointMassTask {
    fn reward(&self, s: &State, _a: usize, next: &State) -> f64 {
        match (s, next) {
            (State::Continuous(x), State::Continuous(n)) => self.transition_reward(x, n),
            _ => 0.0,
        }
    }

    fn is_terminal(&self, s: &State) -> bool {
        matches!(s, State::Continuous(x) if self.is_terminal_vec(x))
    }
}

impl Environment for PointMass2D {
    fn name(&self) -> &'static str {
        "pointmass"
    }

    fn action_count(&self) -> usize {
        Self::ACTIONS
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn task_count(&self) -> usize {
        self.lattice * self.lattice
    }

    fn task(&self, task_id: usize) -> TaskSpec {
        TaskSpec::new(task_id, Arc::new(self.point_task(task_id)), self.discount, Self::ACTIONS)
            .expect("point-mass task parameters are valid")
    }

    fn real_dynamics(&self) -> DynamicsModel {
        DynamicsModel::Linear(LinearDynamics::real())
    }

    fn reset(&self, task_id: usize, rng: &mut dyn RngCore) -> State {
        State::Continuous(self.reset_state(task_id, rng))
    }

    fn step(&self, task_id: usize, s: &State, a: usize, steps_taken: usize) -> StepResult {
        let x = s.vector().expect("point-mass states are continuous");
        self.pointmass_step(task_id, x, a, steps_taken)
    }
}

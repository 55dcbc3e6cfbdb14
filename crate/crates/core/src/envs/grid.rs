//! 7×7 deterministic grid-world navigation; every cell is a potential target.

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Environment, Outcome, StepResult};
use crate::models::{DeterministicTable, DynamicsModel};
use crate::soft::{Reward, State, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridRewards {
    pub target_bonus: f64,
    pub out_of_bounds_penalty: f64,
    /// Reward per unit decrease of Manhattan distance to the target.
    pub shaping: f64,
}

impl Default for GridRewards {
    fn default() -> Self {
        Self {
            target_bonus: 10.0,
            out_of_bounds_penalty: -10.0,
            shaping: 1.0,
        }
    }
}

/// Cells are indexed `y * width + x`; index `width * height` is the
/// out-of-bounds sink. Actions: 0 up (+y), 1 down, 2 left (−x), 3 right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridWorld {
    pub width: usize,
    pub height: usize,
    pub max_steps: usize,
    pub discount: f64,
    pub rewards: GridRewards,
}

impl Default for GridWorld {
    fn default() -> Self {
        Self {
            width: 7,
            height: 7,
            max_steps: 100,
            discount: 0.99,
            rewards: GridRewards::default(),
        }
    }
}

impl GridWorld {
    pub const ACTIONS: usize = 4;

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }

    /// Cells plus the out-of-bounds sink.
    pub fn state_count(&self) -> usize {
        self.cell_count() + 1
    }

    pub fn sink(&self) -> usize {
        self.cell_count()
    }

    pub fn cell(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn coords(&self, s: usize) -> (usize, usize) {
        (s % self.width, s / self.width)
    }

    pub fn real_next(&self, s: usize, a: usize) -> usize {
        let (x, y) = self.coords(s);
        let (x, y) = (x as i64, y as i64);
        let (nx, ny) = match a {
            0 => (x, y + 1),
            1 => (x, y - 1),
            2 => (x - 1, y),
            3 => (x + 1, y),
            _ => panic!("grid action {a} out of range"),
        };
        if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
            self.sink()
        } else {
            self.cell(nx as usize, ny as usize)
        }
    }

    pub fn real_table(&self) -> DeterministicTable {
        let next = (0..self.cell_count())
            .flat_map(|s| (0..Self::ACTIONS).map(move |a| (s, a)))
            .map(|(s, a)| self.real_next(s, a))
            .collect();
        DeterministicTable::new(self.cell_count(), self.state_count(), Self::ACTIONS, next)
            .expect("grid table is well formed")
    }

    pub fn grid_task(&self, target: usize) -> GridTask {
        assert!(target < self.cell_count(), "target {target} is not a cell");
        GridTask {
            width: self.width,
            height: self.height,
            target,
            rewards: self.rewards,
        }
    }

    /// One step of the real dynamics toward `target`.
    pub fn grid_step(&self, target: usize, s: usize, a: usize, steps_taken: usize) -> StepResult {
        let next = self.real_next(s, a);
        let task = self.grid_task(target);
        let reward = task.transition_reward(s, next);
        let outcome = if next == self.sink() {
            Outcome::OutOfBounds
        } else if next == target {
            Outcome::Target
        } else if steps_taken + 1 >= self.max_steps {
            Outcome::Timeout
        } else {
            Outcome::Continue
        };
        StepResult {
            next: State::Discrete(next),
            reward,
            done: outcome.is_done(),
            outcome,
        }
    }
}

/// Reward of one grid task: bonus on reaching the target, penalty on leaving
/// the grid, and shaping on Manhattan distance. Target and sink are terminal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridTask {
    pub width: usize,
    pub height: usize,
    pub target: usize,
    pub rewards: GridRewards,
}

impl GridTask {
    pub fn sink(&self) -> usize {
        self.width * self.height
    }

    pub fn distance(&self, s: usize) -> f64 {
        let (x, y) = (s % self.width, s / self.width);
        let (tx, ty) = (self.target % self.width, self.target / self.width);
        (x.abs_diff(tx) + y.abs_diff(ty)) as f64
    }

    pub fn is_terminal_index(&self, s: usize) -> bool {
        s == self.target || s >= self.sink()
    }

    pub fn transition_reward(&self, s: usize, next: usize) -> f64 {
        if self.is_terminal_index(s) {
            return 0.0;
        }
        if next >= self.sink() {
            return self.rewards.out_of_bounds_penalty;
        }
        let mut r = self.rewards.shaping * (self.distance(s) - self.distance(next));
        if next == self.target {
            r += self.rewards.target_bonus;
        }
        r
    }
}

impl Reward for GridTask {
    fn reward(&self, s: &State, _a: usize, next: &State) -> f64 {
        match (s, next) {
            (State::Discrete(s), State::Discrete(n)) => self.transition_reward(*s, *n),
            _ => 0.0,
        }
    }

    fn is_terminal(&self, s: &State) -> bool {
        matches!(s, State::Discrete(i) if self.is_terminal_index(*i))
    }
}

impl Environment for GridWorld {
    fn name(&self) -> &'static str {
        "grid"
    }

    fn action_count(&self) -> usize {
        Self::ACTIONS
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn task_count(&self) -> usize {
        self.cell_count()
    }

    fn task(&self, task_id: usize) -> TaskSpec {
        TaskSpec::new(task_id, Arc::new(self.grid_task(task_id)), self.discount, Self::ACTIONS)
            .expect("grid task parameters are valid")
    }

    fn real_dynamics(&self) -> DynamicsModel {
        DynamicsModel::Deterministic(self.real_table())
    }

    /// Uniform start over the cells other than the target.
    fn reset(&self, task_id: usize, rng: &mut dyn RngCore) -> State {
        let k = rng.gen_range(0..self.cell_count() - 1);
        State::Discrete(if k >= task_id { k + 1 } else { k })
    }

    fn step(&self, task_id: usize, s: &State, a: usize, steps_taken: usize) -> StepResult {
        let s = s.index().expect("grid states are discrete");
        self.grid_step(task_id, s, a, steps_taken)
    }
}

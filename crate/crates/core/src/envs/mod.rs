//! The two simulated environments and the internal-dynamics corruptions.

pub mod grid;
pub mod pointmass;
pub mod scramble;

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::models::DynamicsModel;
use crate::soft::{State, TaskSpec};

pub use grid::{GridTask, GridWorld};
pub use pointmass::{PointMass2D, PointMassTask};
pub use scramble::{make_scramble, scrambled_dynamics, ScrambleMap, ScrambleMode};

/// Action names shared by both environments, in index order.
pub const ACTION_NAMES: [&str; 4] = ["up", "down", "left", "right"];

pub fn action_from_name(name: &str) -> Option<usize> {
    ACTION_NAMES.iter().position(|n| n.eq_ignore_ascii_case(name))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Target,
    OutOfBounds,
    Timeout,
    Continue,
}

impl Outcome {
    pub fn is_done(self) -> bool {
        self != Outcome::Continue
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Target => "target",
            Outcome::OutOfBounds => "out_of_bounds",
            Outcome::Timeout => "timeout",
            Outcome::Continue => "continue",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub next: State,
    pub reward: f64,
    pub done: bool,
    pub outcome: Outcome,
}

/// Stateless episodic environment over a fixed task set. Episode state
/// (current state, step index) lives with the caller.
pub trait Environment: Send + Sync {
    fn name(&self) -> &'static str;
    fn action_count(&self) -> usize;
    fn max_steps(&self) -> usize;
    fn task_count(&self) -> usize;
    fn task(&self, task_id: usize) -> TaskSpec;
    fn real_dynamics(&self) -> DynamicsModel;
    fn reset(&self, task_id: usize, rng: &mut dyn RngCore) -> State;
    /// `steps_taken` counts the steps already taken in this episode.
    fn step(&self, task_id: usize, s: &State, a: usize, steps_taken: usize) -> StepResult;
}

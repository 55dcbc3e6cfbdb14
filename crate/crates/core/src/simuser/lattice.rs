//! Soft value iteration for continuous point-mass users on a regular state
//! lattice, with multilinear interpolation between nodes.
//!
//! The soft value is stored at the lattice nodes. `Q(x, a)` at any state is
//! the one-step lookahead `R(x, a, x') + γ·V(x')` under the user's internal
//! dynamics, where `V(x')` is interpolated from the nodes and pinned to the
//! absorbing terminal value at terminal states themselves. Value iteration runs in place over the nodes until a full sweep
//! changes no node by more than the tolerance.

use crate::envs::PointMassTask;
use crate::error::{invalid, Error, Result};
use crate::models::{LinearDynamics, CONTROLS};
use crate::numeric::log_sum_exp;
use crate::soft::{terminal_value, SoftQFunction, State, StateVec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub step: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, count: usize) -> Result<Self> {
        if count == 0 || !(max >= min) || (count == 1 && max != min) {
            return Err(invalid(format!("bad lattice axis [{min}, {max}] with {count} nodes")));
        }
        let step = if count == 1 { 0.0 } else { (max - min) / (count - 1) as f64 };
        Ok(Self { min, step, count })
    }

    pub fn point(value: f64) -> Self {
        Self {
            min: value,
            step: 0.0,
            count: 1,
        }
    }

    pub fn value(&self, i: usize) -> f64 {
        self.min + self.step * i as f64
    }

    /// Lower node and interpolation weight of the upper node, clamped to the axis.
    fn locate(&self, x: f64) -> (usize, f64) {
        if self.count == 1 {
            return (0, 0.0);
        }
        let t = ((x - self.min) / self.step).clamp(0.0, (self.count - 1) as f64);
        let i = (t.floor() as usize).min(self.count - 2);
        (i, t - i as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeSpec {
    pub position: Axis,
    pub velocity: Axis,
}

impl LatticeSpec {
    /// Positions every 0.01 over the unit square. Dynamics that forget
    /// velocity entirely only ever visit zero velocity after one step, so a
    /// single velocity node suffices; otherwise velocities span ±0.05 and the
    /// position grid is coarsened to 0.02.
    pub fn for_dynamics(dynamics: &LinearDynamics) -> Self {
        let p = dynamics.params;
        let memoryless = p[2] == 0.0 && p[3] == 0.0 && p[6] == 0.0 && p[7] == 0.0;
        if memoryless {
            Self {
                position: Axis::new(0.0, 1.0, 101).unwrap(),
                velocity: Axis::point(0.0),
            }
        } else {
            Self {
                position: Axis::new(0.0, 1.0, 51).unwrap(),
                velocity: Axis::new(-0.05, 0.05, 11).unwrap(),
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.position.count.pow(2) * self.velocity.count.pow(2)
    }

    fn node(&self, index: usize) -> StateVec {
        let (p, v) = (self.position.count, self.velocity.count);
        let ivy = index % v;
        let ivx = (index / v) % v;
        let iy = (index / (v * v)) % p;
        let ix = index / (v * v * p);
        [
            self.position.value(ix),
            self.position.value(iy),
            self.velocity.value(ivx),
            self.velocity.value(ivy),
        ]
    }

    /// Appends the (node, weight) stencil of `x` to `out`.
    fn stencil(&self, x: &StateVec, out: &mut Vec<(u32, f64)>) {
        let axes = [self.position, self.position, self.velocity, self.velocity];
        let located: [(usize, f64); 4] = std::array::from_fn(|d| axes[d].locate(x[d]));
        let start = out.len();
        out.push((0, 1.0));
        for d in 0..4 {
            let (i, w) = located[d];
            let count = axes[d].count as u32;
            let end = out.len();
            for k in start..end {
                let (idx, weight) = out[k];
                out[k] = (idx * count + i as u32, weight * (1.0 - w));
                if w > 0.0 {
                    out.push((idx * count + i as u32 + 1, weight * w));
                }
            }
        }
        let mut k = start;
        while k < out.len() {
            if out[k].1 == 0.0 {
                out.swap_remove(k);
            } else {
                k += 1;
            }
        }
    }
}

/// Soft Q function of one point-mass task under a linear internal model.
#[derive(Debug, Clone)]
pub struct LatticeSoftQ {
    pub spec: LatticeSpec,
    pub values: Vec<f64>,
    pub dynamics: LinearDynamics,
    pub task: PointMassTask,
    pub discount: f64,
    pub sweeps: usize,
    pub residual: f64,
}

impl LatticeSoftQ {
    pub fn solve(
        spec: LatticeSpec,
        dynamics: LinearDynamics,
        task: PointMassTask,
        discount: f64,
        tol: f64,
        max_sweeps: usize,
    ) -> Result<Self> {
        if !(discount > 0.0 && discount < 1.0) {
            return Err(invalid("lattice value iteration needs a discount in (0, 1)"));
        }
        let n = spec.node_count();
        let a_n = CONTROLS.len();
        let v_term = terminal_value(a_n, discount);
        let mut terminal = vec![false; n];
        let mut rewards = vec![0.0; n * a_n];
        let mut offsets = vec![0u32; n * a_n + 1];
        let mut stencils: Vec<(u32, f64)> = Vec::new();
        for i in 0..n {
            let x = spec.node(i);
            terminal[i] = task.is_terminal_vec(&x);
            for a in 0..a_n {
                let slot = i * a_n + a;
                if !terminal[i] {
                    let next = dynamics.step(&x, a);
                    rewards[slot] = task.transition_reward(&x, &next);
                    if task.is_terminal_vec(&next) {
                        rewards[slot] += discount * v_term;
                    } else {
                        spec.stencil(&next, &mut stencils);
                    }
                }
                offsets[slot + 1] = stencils.len() as u32;
            }
        }
        // Target nodes hold the value of arriving there so that interpolation
        // just outside the target radius is not dragged toward zero.
        let arrival = task.rewards.step_cost + task.rewards.target_bonus + discount * v_term;
        let mut values: Vec<f64> = (0..n)
            .map(|i| if terminal[i] && task.at_target(&spec.node(i)) { arrival } else { v_term })
            .collect();
        let mut q = [0.0; 4];
        let mut residual = f64::INFINITY;
        for sweep in 1..=max_sweeps {
            residual = 0.0;
            for i in 0..n {
                if terminal[i] {
                    continue;
                }
                for (a, qa) in q.iter_mut().enumerate() {
                    let slot = i * a_n + a;
                    let lo = offsets[slot] as usize;
                    let hi = offsets[slot + 1] as usize;
                    let v: f64 = stencils[lo..hi].iter().map(|(j, w)| w * values[*j as usize]).sum();
                    *qa = rewards[slot] + discount * v;
                }
                let new = log_sum_exp(&q);
                residual = f64::max(residual, (new - values[i]).abs());
                values[i] = new;
            }
            if !residual.is_finite() {
                break;
            }
            if residual <= tol {
                return Ok(Self {
                    spec,
                    values,
                    dynamics,
                    task,
                    discount,
                    sweeps: sweep,
                    residual,
                });
            }
        }
        Err(Error::Convergence {
            iterations: max_sweeps,
            residual,
        })
    }

    /// Interpolated soft value; the absorbing value at terminal states.
    pub fn value_at(&self, x: &StateVec) -> f64 {
        if self.task.is_terminal_vec(x) {
            return terminal_value(CONTROLS.len(), self.discount);
        }
        let mut stencil = Vec::with_capacity(16);
        self.spec.stencil(x, &mut stencil);
        stencil.iter().map(|(j, w)| w * self.values[*j as usize]).sum()
    }

    pub fn q_vec(&self, x: &StateVec) -> [f64; 4] {
        std::array::from_fn(|a| {
            let next = self.dynamics.step(x, a);
            self.task.transition_reward(x, &next) + self.discount * self.value_at(&next)
        })
    }
}

impl SoftQFunction for LatticeSoftQ {
    fn q_values(&self, s: &State) -> Result<Vec<f64>> {
        let x = s
            .vector()
            .ok_or_else(|| invalid("lattice Q functions take continuous states"))?;
        Ok(self.q_vec(x).to_vec())
    }
}

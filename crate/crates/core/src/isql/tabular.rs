//! Full-batch trainer for finite state spaces: tabular soft Q per task and
//! either free tabular dynamics or the action-intent model over the real
//! dynamics.

use std::collections::BTreeMap;

use rand::Rng;

use super::artifact::{CurvePoint, OptimizerState, TrainArtifact, TruthPoint};
use super::{DynamicsFamily, IsqlConfig, PenaltyCost, Truth};
use crate::error::{invalid, Error, Result};
use crate::models::{
    ActionIntentDynamics, AdamState, DeterministicTable, DynamicsModel, IntentModel, ModelRecord, QModel,
    TabularDynamics,
};
use crate::numeric::{log_sum_exp, softmax_backward, softmax_into, StableSum};
use crate::simuser::DemoSet;
use crate::soft::{terminal_value, State, TabularSoftQ, TaskSpec};
use crate::util::stream_rng;

/// Everything about a finite-state fitting problem that stays fixed during
/// training: demo counts, constraint states, rewards and terminal sets.
#[derive(Debug, Clone)]
pub struct TabularProblem {
    pub state_count: usize,
    pub action_count: usize,
    pub real: DeterministicTable,
    pub task_ids: Vec<usize>,
    pub discount: f64,
    /// Per task, `[state × action]` demo action counts.
    pub counts: Vec<Vec<f64>>,
    pub samples: Vec<usize>,
    /// Per task, `[source × action × state]` rewards `R(s, a, s')`.
    pub rewards: Vec<Vec<f64>>,
    pub terminal: Vec<Vec<bool>>,
}

impl TabularProblem {
    /// `real` covers the non-absorbing source states; `samples` are the
    /// constraint states, each constrained under every action.
    pub fn new(real: DeterministicTable, tasks: &[TaskSpec], demos: &[DemoSet], samples: &[State]) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        if demos.len() != tasks.len() {
            return Err(Error::Config("one demo set per task is required".into()));
        }
        let (n, a_n, sources) = (real.state_count, real.action_count, real.source_count);
        let discount = tasks[0].discount;
        let mut counts = Vec::new();
        let mut rewards = Vec::new();
        let mut terminal = Vec::new();
        for (task, d) in tasks.iter().zip(demos) {
            if d.task_id != task.task_id {
                return Err(Error::Config(format!(
                    "demo set for task {} aligned with task {}",
                    d.task_id, task.task_id
                )));
            }
            if task.action_count != a_n || task.discount != discount {
                return Err(Error::Config("tasks disagree on action count or discount".into()));
            }
            counts.push(d.action_counts(n, a_n)?);
            let mut r = vec![0.0; sources * a_n * n];
            for s in 0..sources {
                for a in 0..a_n {
                    for j in 0..n {
                        r[(s * a_n + a) * n + j] = task.reward(&State::Discrete(s), a, &State::Discrete(j));
                    }
                }
            }
            rewards.push(r);
            let term: Vec<bool> = (0..n).map(|s| task.is_terminal(&State::Discrete(s))).collect();
            for s in sources..n {
                if !term[s] {
                    return Err(invalid(format!("state {s} has no dynamics but is not terminal")));
                }
            }
            terminal.push(term);
        }
        let samples = samples
            .iter()
            .map(|s| {
                s.index()
                    .filter(|i| *i < n)
                    .ok_or_else(|| invalid(format!("constraint state {s} is not tabular")))
            })
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(invalid("no constraint states"));
        }
        Ok(Self {
            state_count: n,
            action_count: a_n,
            real,
            task_ids: tasks.iter().map(|t| t.task_id).collect(),
            discount,
            counts,
            samples,
            rewards,
            terminal,
        })
    }

    pub fn task_count(&self) -> usize {
        self.task_ids.len()
    }

    pub fn theta_len(&self) -> usize {
        self.task_count() * self.state_count * self.action_count
    }

    /// Initial φ for a family: near-uniform tabular logits (seeded jitter)
    /// or a uniform intent model.
    pub fn initial_phi(&self, family: DynamicsFamily, seed: u64) -> Result<DynamicsModel> {
        let (sources, a_n, n) = (self.real.source_count, self.action_count, self.state_count);
        match family {
            DynamicsFamily::Tabular => {
                let mut rng = stream_rng(seed, &[0x7068_69]);
                let mut t = TabularDynamics::uniform(sources, a_n, n);
                for l in &mut t.logits {
                    *l = rng.gen_range(-1e-3..1e-3);
                }
                Ok(DynamicsModel::Tabular(t))
            }
            DynamicsFamily::ActionIntent => Ok(DynamicsModel::ActionIntent(ActionIntentDynamics {
                intent: IntentModel::Tabular {
                    source_count: sources,
                    action_count: a_n,
                    logits: vec![0.0; sources * a_n * a_n],
                },
                real: Box::new(DynamicsModel::Deterministic(self.real.clone())),
            })),
            other => Err(Error::Config(format!("{other:?} dynamics need a continuous problem"))),
        }
    }

    pub fn initial_thetas(&self) -> Vec<f64> {
        vec![self.discount * terminal_value(self.action_count, self.discount); self.theta_len()]
    }

    /// Dense `[source × action × state]` next-state probabilities of φ.
    fn transition_tensor(&self, phi: &DynamicsModel) -> Result<Vec<f64>> {
        let (sources, a_n, n) = (self.real.source_count, self.action_count, self.state_count);
        let mut out = vec![0.0; sources * a_n * n];
        match phi {
            DynamicsModel::Tabular(t) => {
                if t.source_count != sources || t.action_count != a_n || t.state_count != n {
                    return Err(invalid("tabular dynamics shape does not match the problem"));
                }
                for sa in 0..sources * a_n {
                    softmax_into(&t.logits[sa * n..(sa + 1) * n], &mut out[sa * n..(sa + 1) * n]);
                }
            }
            DynamicsModel::ActionIntent(ActionIntentDynamics {
                intent: IntentModel::Tabular { logits, .. },
                ..
            }) => {
                if logits.len() != sources * a_n * a_n {
                    return Err(invalid("intent model shape does not match the problem"));
                }
                let mut f = vec![0.0; a_n];
                for s in 0..sources {
                    for a in 0..a_n {
                        let sa = s * a_n + a;
                        softmax_into(&logits[sa * a_n..(sa + 1) * a_n], &mut f);
                        for (a_int, p) in f.iter().enumerate() {
                            out[sa * n + self.real.next_state(s, a_int)] += p;
                        }
                    }
                }
            }
            other => return Err(invalid(format!("{} dynamics are not trainable here", other.family()))),
        }
        Ok(out)
    }

    /// Objective value, optionally accumulating `∂/∂θ` and `∂/∂φ` (the flat
    /// parameter vector of `phi`).
    pub fn evaluate(
        &self,
        thetas: &[f64],
        phi: &DynamicsModel,
        rho: f64,
        grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Result<PenaltyCost> {
        if thetas.len() != self.theta_len() {
            return Err(invalid("theta vector has the wrong length"));
        }
        let (sources, a_n, n) = (self.real.source_count, self.action_count, self.state_count);
        let gamma = self.discount;
        let v_term = terminal_value(a_n, gamma);
        let t = self.transition_tensor(phi)?;
        let want_grad = grads.is_some();
        let (mut g_theta, mut g_phi) = match grads {
            Some((gt, gp)) => (Some(gt), Some(gp)),
            None => (None, None),
        };
        let mut g_t = if want_grad { vec![0.0; t.len()] } else { Vec::new() };
        let mut nll = StableSum::new();
        let mut penalty = StableSum::new();
        let mut values = vec![0.0; n];
        let mut policy = vec![0.0; n * a_n];
        let mut g_values = vec![0.0; n];
        for task in 0..self.task_count() {
            let q = &thetas[task * n * a_n..(task + 1) * n * a_n];
            let term = &self.terminal[task];
            let rewards = &self.rewards[task];
            for s in 0..n {
                let row = &q[s * a_n..(s + 1) * a_n];
                let lse = softmax_into(row, &mut policy[s * a_n..(s + 1) * a_n]);
                values[s] = if term[s] { v_term } else { lse };
            }
            let counts = &self.counts[task];
            let mut g_q = vec![0.0; n * a_n];
            for s in 0..n {
                let c = &counts[s * a_n..(s + 1) * a_n];
                let total: f64 = c.iter().sum();
                if total == 0.0 {
                    continue;
                }
                let lse = log_sum_exp(&q[s * a_n..(s + 1) * a_n]);
                for a in 0..a_n {
                    if c[a] != 0.0 {
                        nll.add(c[a] * (lse - q[s * a_n + a]));
                    }
                    g_q[s * a_n + a] += total * policy[s * a_n + a] - c[a];
                }
            }
            g_values.iter_mut().for_each(|g| *g = 0.0);
            for &s in self.samples.iter().filter(|s| !term[**s]) {
                for a in 0..a_n {
                    let sa = s * a_n + a;
                    let base = sa * n;
                    let mut target = StableSum::new();
                    for j in 0..n {
                        let p = t[base + j];
                        if p != 0.0 {
                            target.add(p * (rewards[base + j] + gamma * values[j]));
                        }
                    }
                    let delta = q[sa] - target.value();
                    penalty.add(delta * delta);
                    if !want_grad {
                        continue;
                    }
                    let g = rho * delta;
                    g_q[sa] += g;
                    for j in 0..n {
                        g_t[base + j] -= g * (rewards[base + j] + gamma * values[j]);
                        if !term[j] {
                            g_values[j] -= g * gamma * t[base + j];
                        }
                    }
                }
            }
            if let Some(gt) = g_theta.as_deref_mut() {
                for s in 0..n {
                    if g_values[s] != 0.0 {
                        for b in 0..a_n {
                            g_q[s * a_n + b] += g_values[s] * policy[s * a_n + b];
                        }
                    }
                }
                let out = &mut gt[task * n * a_n..(task + 1) * n * a_n];
                for (o, g) in out.iter_mut().zip(&g_q) {
                    *o += g;
                }
            }
        }
        if let Some(gp) = g_phi.as_deref_mut() {
            match phi {
                DynamicsModel::Tabular(_) => {
                    for sa in 0..sources * a_n {
                        softmax_backward(
                            &t[sa * n..(sa + 1) * n],
                            &g_t[sa * n..(sa + 1) * n],
                            &mut gp[sa * n..(sa + 1) * n],
                        );
                    }
                }
                DynamicsModel::ActionIntent(ActionIntentDynamics {
                    intent: IntentModel::Tabular { logits, .. },
                    ..
                }) => {
                    let mut f = vec![0.0; a_n];
                    let mut g_f = vec![0.0; a_n];
                    for s in 0..sources {
                        for a in 0..a_n {
                            let sa = s * a_n + a;
                            softmax_into(&logits[sa * a_n..(sa + 1) * a_n], &mut f);
                            for (a_int, g) in g_f.iter_mut().enumerate() {
                                *g = g_t[sa * n + self.real.next_state(s, a_int)];
                            }
                            softmax_backward(&f, &g_f, &mut gp[sa * a_n..(sa + 1) * a_n]);
                        }
                    }
                }
                _ => unreachable!("transition_tensor rejected other families"),
            }
        }
        let (nll, penalty) = (nll.value(), 0.5 * rho * penalty.value());
        Ok(PenaltyCost {
            total: nll + penalty,
            nll,
            penalty,
        })
    }

    pub fn q_tables(&self, thetas: &[f64]) -> Vec<TabularSoftQ> {
        let block = self.state_count * self.action_count;
        thetas
            .chunks(block)
            .map(|c| TabularSoftQ {
                state_count: self.state_count,
                action_count: self.action_count,
                values: c.to_vec(),
            })
            .collect()
    }
}

pub fn phi_params(phi: &DynamicsModel) -> &[f64] {
    match phi {
        DynamicsModel::Tabular(t) => &t.logits,
        DynamicsModel::ActionIntent(a) => a.intent.params(),
        DynamicsModel::Mixture(m) => &m.logits,
        _ => &[],
    }
}

pub fn phi_params_mut(phi: &mut DynamicsModel) -> &mut [f64] {
    match phi {
        DynamicsModel::Tabular(t) => &mut t.logits,
        DynamicsModel::ActionIntent(a) => a.intent.params_mut(),
        DynamicsModel::Mixture(m) => &mut m.logits,
        _ => &mut [],
    }
}

/// Runs Adam on the penalised objective for `config.iterations` steps.
pub fn train_tabular(problem: &TabularProblem, config: &IsqlConfig, truth: Option<&Truth>) -> Result<TrainArtifact> {
    config.validate()?;
    let mut phi = problem.initial_phi(config.family, config.seed)?;
    let mut thetas = problem.initial_thetas();
    let mut theta_adam = AdamState::new(config.adam(config.theta_learning_rate), thetas.len());
    let mut phi_adam = AdamState::new(config.adam(config.phi_learning_rate), phi_params(&phi).len());
    let mut curve = Vec::with_capacity(config.iterations);
    let mut truth_curve = Vec::new();
    let mut g_theta = vec![0.0; thetas.len()];
    let mut g_phi = vec![0.0; phi_params(&phi).len()];
    for it in 0..config.iterations {
        if let Some(t) = truth {
            if it % config.log_every == 0 {
                truth_curve.push(TruthPoint {
                    iteration: it,
                    value: t.measure(&phi)?,
                });
            }
        }
        g_theta.iter_mut().for_each(|g| *g = 0.0);
        g_phi.iter_mut().for_each(|g| *g = 0.0);
        let cost = problem.evaluate(&thetas, &phi, config.rho, Some((&mut g_theta, &mut g_phi)))?;
        if !cost.total.is_finite() || g_theta.iter().chain(&g_phi).any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: it,
                detail: format!("objective {} (nll {}, penalty {})", cost.total, cost.nll, cost.penalty),
            });
        }
        curve.push(CurvePoint {
            iteration: it,
            total: cost.total,
            nll: cost.nll,
            penalty: cost.penalty,
        });
        let (move_theta, move_phi) = config.schedule(it);
        if move_theta {
            theta_adam.update(&mut thetas, &g_theta)?;
        }
        if move_phi {
            phi_adam.update(phi_params_mut(&mut phi), &g_phi)?;
        }
    }
    let final_cost = problem.evaluate(&thetas, &phi, config.rho, None)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("final_total".to_string(), final_cost.total);
    metrics.insert("final_nll".to_string(), final_cost.nll);
    metrics.insert("final_penalty".to_string(), final_cost.penalty);
    if let Some(t) = truth {
        let value = t.measure(&phi)?;
        truth_curve.push(TruthPoint {
            iteration: config.iterations,
            value,
        });
        metrics.insert("dynamics_score".to_string(), value);
    }
    let thetas = problem
        .q_tables(&thetas)
        .into_iter()
        .map(|q| ModelRecord::from(&QModel::Tabular(q)))
        .collect();
    Ok(TrainArtifact::new(
        config.clone(),
        problem.task_ids.clone(),
        ModelRecord::from(&phi),
        thetas,
        OptimizerState {
            theta: theta_adam,
            phi: phi_adam,
        },
        curve,
        truth_curve,
        metrics,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Environment, GridWorld};
    use crate::models::{check_gradient, FnObjective};
    use crate::simuser::{build_grid_user, collect_demos, enumerate_grid_constraints, UserOptions};

    fn small_problem() -> (TabularProblem, GridWorld) {
        let env = GridWorld::default();
        let tasks: Vec<TaskSpec> = [3, 30].iter().map(|t| env.task(*t)).collect();
        let user = build_grid_user(&env, env.real_dynamics(), &[3, 30], UserOptions::default()).unwrap();
        let demos: Vec<DemoSet> = [3, 30]
            .iter()
            .map(|t| collect_demos(&user, &env, *t, 5, 1).unwrap())
            .collect();
        let samples = crate::isql::constraint_states(&enumerate_grid_constraints(&env));
        (TabularProblem::new(env.real_table(), &tasks, &demos, &samples).unwrap(), env)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (problem, _) = small_problem();
        for family in [DynamicsFamily::Tabular, DynamicsFamily::ActionIntent] {
            let phi0 = problem.initial_phi(family, 3).unwrap();
            let mut rng = stream_rng(9, &[]);
            let thetas: Vec<f64> = problem.initial_thetas().iter().map(|v| v + rng.gen_range(-2.0..2.0)).collect();
            let mut phi_init = phi0.clone();
            for p in phi_params_mut(&mut phi_init) {
                *p = rng.gen_range(-1.0..1.0);
            }
            let nt = thetas.len();
            let np = phi_params(&phi_init).len();
            let mut x = thetas.clone();
            x.extend_from_slice(phi_params(&phi_init));
            let obj = FnObjective {
                dim: nt + np,
                f: |x: &[f64]| {
                    let mut phi = phi_init.clone();
                    phi_params_mut(&mut phi).copy_from_slice(&x[nt..]);
                    let mut gt = vec![0.0; nt];
                    let mut gp = vec![0.0; np];
                    let c = problem.evaluate(&x[..nt], &phi, 0.5, Some((&mut gt, &mut gp))).unwrap();
                    gt.extend(gp);
                    Ok((c.total, gt))
                },
            };
            let check = check_gradient(&obj, &x, 1e-5).unwrap();
            assert!(check.passes(1e-4), "{family:?}: {}", check.relative_error);
        }
    }

    #[test]
    fn fast_objective_matches_reference() {
        let (problem, env) = small_problem();
        let phi = problem.initial_phi(DynamicsFamily::Tabular, 1).unwrap();
        let mut rng = stream_rng(2, &[]);
        let thetas: Vec<f64> = problem.initial_thetas().iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
        let fast = problem.evaluate(&thetas, &phi, 0.3, None).unwrap();
        let tables = problem.q_tables(&thetas);
        let refs: Vec<&dyn crate::soft::SoftQFunction> = tables.iter().map(|t| t as _).collect();
        let tasks: Vec<TaskSpec> = problem.task_ids.iter().map(|t| env.task(*t)).collect();
        let demos: Vec<DemoSet> = {
            let user = build_grid_user(&env, env.real_dynamics(), &[3, 30], UserOptions::default()).unwrap();
            [3, 30].iter().map(|t| collect_demos(&user, &env, *t, 5, 1).unwrap()).collect()
        };
        let pairs: Vec<(State, usize)> = problem
            .samples
            .iter()
            .flat_map(|s| (0..4).map(move |a| (State::Discrete(*s), a)))
            .collect();
        let slow = crate::isql::penalty_cost(&refs, &phi, &demos, &pairs, &tasks, 0.3).unwrap();
        assert!((fast.nll - slow.nll).abs() < 1e-9 * slow.nll.abs().max(1.0));
        assert!((fast.penalty - slow.penalty).abs() < 1e-9 * slow.penalty.abs().max(1.0));
    }
}

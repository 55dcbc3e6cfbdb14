//! Minibatch trainer for the continuous point-mass: one tanh perceptron Q
//! per task, and either a sigmoid-constrained linear dynamics model or a
//! categorical mixture over frozen candidate dynamics.
//!
//! Rewards are piecewise constant in the next state, so φ receives gradient
//! only through `γ·V(s')` at non-terminal predicted next states.

use std::collections::BTreeMap;

use rand::Rng;

use super::artifact::{CurvePoint, OptimizerState, TrainArtifact, TruthPoint};
use super::{DynamicsFamily, IsqlConfig, PenaltyCost, Truth};
use crate::envs::PointMassTask;
use crate::error::{invalid, Error, Result};
use crate::models::{
    AdamState, CategoricalMixtureDynamics, DynamicsModel, LinearDynamics, MlpCache, MlpQ, ModelRecord, QModel,
};
use crate::numeric::{logit, softmax_into, StableSum};
use crate::simuser::DemoSet;
use crate::soft::{terminal_value, StateVec};
use crate::util::stream_rng;

/// Inputs are centred on each task's target before scaling.
pub const INPUT_SCALE: [f64; 4] = [16.0, 16.0, 20.0, 20.0];
pub const OUTPUT_SCALE: f64 = 50.0;

#[derive(Debug, Clone)]
pub struct ContinuousProblem {
    pub task_ids: Vec<usize>,
    pub tasks: Vec<PointMassTask>,
    pub discount: f64,
    pub demos: Vec<Vec<(StateVec, usize)>>,
    /// Constraint `(state, action)` pairs.
    pub samples: Vec<(StateVec, usize)>,
    /// Frozen candidates for the mixture family.
    pub candidates: Vec<LinearDynamics>,
}

const ACTIONS: usize = 4;

/// Trainable φ in unconstrained coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum ContinuousPhi {
    Linear { latents: [f64; 8] },
    Mixture { logits: Vec<f64> },
}

impl ContinuousPhi {
    pub fn params(&self) -> &[f64] {
        match self {
            ContinuousPhi::Linear { latents } => latents,
            ContinuousPhi::Mixture { logits } => logits,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            ContinuousPhi::Linear { latents } => latents,
            ContinuousPhi::Mixture { logits } => logits,
        }
    }
}

/// Per-worker scratch buffers.
struct Scratch {
    q: MlpCache,
    next: Vec<MlpCache>,
    grad_state: [f64; 4],
}

impl ContinuousProblem {
    pub fn new(
        task_ids: Vec<usize>,
        tasks: Vec<PointMassTask>,
        discount: f64,
        demos: &[DemoSet],
        samples: Vec<(StateVec, usize)>,
        candidates: Vec<LinearDynamics>,
    ) -> Result<Self> {
        if tasks.is_empty() || tasks.len() != task_ids.len() || demos.len() != tasks.len() {
            return Err(Error::Config("tasks, task ids and demo sets must be aligned".into()));
        }
        if samples.is_empty() {
            return Err(invalid("no constraint samples"));
        }
        if let Some((_, a)) = samples.iter().find(|(_, a)| *a >= ACTIONS) {
            return Err(invalid(format!("constraint action {a} out of range")));
        }
        let mut flat = Vec::new();
        for (d, id) in demos.iter().zip(&task_ids) {
            if d.task_id != *id {
                return Err(Error::Config(format!("demo set for task {} aligned with task {id}", d.task_id)));
            }
            let rows = d
                .transitions()
                .map(|t| {
                    let x = t.state.vector().ok_or_else(|| invalid("point-mass demos need continuous states"))?;
                    if t.action >= ACTIONS {
                        return Err(invalid(format!("demo action {} out of range", t.action)));
                    }
                    Ok((*x, t.action))
                })
                .collect::<Result<Vec<_>>>()?;
            if rows.is_empty() {
                return Err(invalid(format!("task {id} has no demo transitions")));
            }
            flat.push(rows);
        }
        Ok(Self {
            task_ids,
            tasks,
            discount,
            demos: flat,
            samples,
            candidates,
        })
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn initial_thetas(&self, hidden: usize, seed: u64) -> Vec<MlpQ> {
        let base = self.discount * terminal_value(ACTIONS, self.discount) / OUTPUT_SCALE;
        (0..self.task_count())
            .map(|i| {
                let t = self.tasks[i].target;
                let mut m = MlpQ::init(4, hidden, ACTIONS, crate::util::derive_seed(seed, &[0x71, i as u64]))
                    .with_normalisation(vec![t[0], t[1], 0.0, 0.0], INPUT_SCALE.to_vec(), OUTPUT_SCALE);
                let b2 = m.params.len() - ACTIONS;
                for p in &mut m.params[b2..] {
                    *p += base;
                }
                m
            })
            .collect()
    }

    pub fn initial_phi(&self, family: DynamicsFamily) -> Result<ContinuousPhi> {
        match family {
            DynamicsFamily::Linear => Ok(ContinuousPhi::Linear { latents: [0.0; 8] }),
            DynamicsFamily::CategoricalMixture => {
                if self.candidates.is_empty() {
                    return Err(Error::Config("mixture training needs candidate dynamics".into()));
                }
                Ok(ContinuousPhi::Mixture {
                    logits: vec![0.0; self.candidates.len()],
                })
            }
            other => Err(Error::Config(format!("{other:?} dynamics need a tabular problem"))),
        }
    }

    pub fn phi_model(&self, phi: &ContinuousPhi) -> Result<DynamicsModel> {
        Ok(match phi {
            ContinuousPhi::Linear { latents } => DynamicsModel::Linear(LinearDynamics::from_latents(latents)),
            ContinuousPhi::Mixture { logits } => {
                DynamicsModel::Mixture(CategoricalMixtureDynamics::new(self.candidates.clone(), logits.clone())?)
            }
        })
    }

    /// Objective over the given demo and sample index batches; each batch's
    /// sum is scaled to estimate the full sum. Gradients accumulate into
    /// `grads` when supplied: one vector per task, then φ.
    pub fn evaluate_batch(
        &self,
        thetas: &[MlpQ],
        phi: &ContinuousPhi,
        rho: f64,
        demo_idx: &[Vec<usize>],
        sample_idx: &[Vec<usize>],
        mut grads: Option<(&mut [Vec<f64>], &mut [f64])>,
    ) -> Result<PenaltyCost> {
        let gamma = self.discount;
        let v_term = terminal_value(ACTIONS, gamma);
        let (linear, weights) = match phi {
            ContinuousPhi::Linear { latents } => (vec![LinearDynamics::from_latents(latents)], vec![1.0]),
            ContinuousPhi::Mixture { logits } => {
                let mut w = vec![0.0; logits.len()];
                softmax_into(logits, &mut w);
                (self.candidates.clone(), w)
            }
        };
        let k = linear.len();
        let mut scratch = Scratch {
            q: thetas[0].new_cache(),
            next: (0..k).map(|_| thetas[0].new_cache()).collect(),
            grad_state: [0.0; 4],
        };
        let mut g_weights = vec![0.0; k];
        let mut g_latents = [0.0; 8];
        let mut nll = StableSum::new();
        let mut penalty = StableSum::new();
        let mut policy = [0.0; ACTIONS];
        let mut next_states = vec![[0.0; 4]; k];
        let mut next_values = vec![0.0; k];
        let mut next_terminal = vec![false; k];
        let mut next_policy = vec![[0.0; ACTIONS]; k];
        for (i, model) in thetas.iter().enumerate() {
            let task = &self.tasks[i];
            let demos = &self.demos[i];
            let scale = demos.len() as f64 / demo_idx[i].len() as f64;
            for &j in &demo_idx[i] {
                let (x, a) = demos[j];
                model.forward_into(&x, &mut scratch.q)?;
                let lse = softmax_into(&scratch.q.output, &mut policy);
                nll.add(scale * (lse - scratch.q.output[a]));
                if let Some((gt, _)) = grads.as_mut() {
                    let mut g = [0.0; ACTIONS];
                    for b in 0..ACTIONS {
                        g[b] = scale * (policy[b] - if b == a { 1.0 } else { 0.0 });
                    }
                    model.backward(&scratch.q, &g, &mut gt[i], None);
                }
            }
            let scale = self.samples.len() as f64 / sample_idx[i].len() as f64;
            for &j in &sample_idx[i] {
                let (x, a) = self.samples[j];
                if task.is_terminal_vec(&x) {
                    continue;
                }
                model.forward_into(&x, &mut scratch.q)?;
                let mut target = 0.0;
                for c in 0..k {
                    let nx = linear[c].step(&x, a);
                    next_states[c] = nx;
                    let r = task.transition_reward(&x, &nx);
                    next_terminal[c] = task.is_terminal_vec(&nx);
                    next_values[c] = if next_terminal[c] {
                        v_term
                    } else {
                        model.forward_into(&nx, &mut scratch.next[c])?;
                        softmax_into(&scratch.next[c].output, &mut next_policy[c])
                    };
                    target += weights[c] * (r + gamma * next_values[c]);
                }
                let delta = scratch.q.output[a] - target;
                penalty.add(scale * delta * delta);
                let Some((gt, _)) = grads.as_mut() else { continue };
                let g = rho * scale * delta;
                let mut g_q = [0.0; ACTIONS];
                g_q[a] = g;
                model.backward(&scratch.q, &g_q, &mut gt[i], None);
                for c in 0..k {
                    let r = task.transition_reward(&x, &next_states[c]);
                    g_weights[c] -= g * (r + gamma * next_values[c]);
                    if next_terminal[c] {
                        continue;
                    }
                    let g_v = -g * gamma * weights[c];
                    let g_out: Vec<f64> = next_policy[c].iter().map(|p| g_v * p).collect();
                    model.backward(&scratch.next[c], &g_out, &mut gt[i], Some(&mut scratch.grad_state));
                    if let ContinuousPhi::Linear { .. } = phi {
                        let lg = linear[0].latent_gradient(&x, a, &scratch.grad_state);
                        for (acc, v) in g_latents.iter_mut().zip(lg) {
                            *acc += v;
                        }
                    }
                }
            }
        }
        if let Some((_, gp)) = grads {
            match phi {
                ContinuousPhi::Linear { .. } => {
                    for (acc, v) in gp.iter_mut().zip(g_latents) {
                        *acc += v;
                    }
                }
                ContinuousPhi::Mixture { .. } => {
                    crate::numeric::softmax_backward(&weights, &g_weights, gp);
                }
            }
        }
        let (nll, penalty) = (nll.value(), 0.5 * rho * penalty.value());
        Ok(PenaltyCost {
            total: nll + penalty,
            nll,
            penalty,
        })
    }

    /// Full-data objective.
    pub fn evaluate(&self, thetas: &[MlpQ], phi: &ContinuousPhi, rho: f64) -> Result<PenaltyCost> {
        let demo_idx: Vec<Vec<usize>> = self.demos.iter().map(|d| (0..d.len()).collect()).collect();
        let sample_idx = vec![(0..self.samples.len()).collect(); self.task_count()];
        self.evaluate_batch(thetas, phi, rho, &demo_idx, &sample_idx, None)
    }
}

/// Continuous constraint pairs from sampled `(State, action)` pairs, with
/// duplicates removed.
pub fn vector_pairs(pairs: &[(crate::soft::State, usize)]) -> Result<Vec<(StateVec, usize)>> {
    super::constraint_pairs(pairs)
        .iter()
        .map(|(s, a)| {
            s.vector()
                .map(|x| (*x, *a))
                .ok_or_else(|| invalid("continuous constraint states expected"))
        })
        .collect()
}

fn draw_batch(rng: &mut impl Rng, len: usize, batch: usize) -> Vec<usize> {
    if batch == 0 || batch >= len {
        (0..len).collect()
    } else {
        (0..batch).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Latents of a linear model, for warm starts and tests.
pub fn latents_of(model: &LinearDynamics) -> [f64; 8] {
    std::array::from_fn(|i| logit(model.params[i].clamp(1e-12, 1.0 - 1e-12)))
}

/// Runs Adam on minibatch estimates of the penalised objective.
pub fn train_continuous(
    problem: &ContinuousProblem,
    config: &IsqlConfig,
    truth: Option<&Truth>,
) -> Result<TrainArtifact> {
    let phi = problem.initial_phi(config.family)?;
    train_continuous_from(problem, config, truth, phi)
}

/// As [`train_continuous`], starting φ at `phi`.
pub fn train_continuous_from(
    problem: &ContinuousProblem,
    config: &IsqlConfig,
    truth: Option<&Truth>,
    mut phi: ContinuousPhi,
) -> Result<TrainArtifact> {
    config.validate()?;
    let mut thetas = problem.initial_thetas(config.hidden_units, config.seed);
    let per_task = thetas[0].params.len();
    let n_tasks = problem.task_count();
    let mut flat: Vec<f64> = thetas.iter().flat_map(|m| m.params.iter().copied()).collect();
    let mut theta_adam = AdamState::new(config.adam(config.theta_learning_rate), flat.len());
    let mut phi_adam = AdamState::new(config.adam(config.phi_learning_rate), phi.params().len());
    let mut rng = stream_rng(config.seed, &[0x6d62]);
    let mut curve = Vec::with_capacity(config.iterations);
    let mut truth_curve = Vec::new();
    let mut g_theta: Vec<Vec<f64>> = vec![vec![0.0; per_task]; n_tasks];
    let mut g_phi = vec![0.0; phi.params().len()];
    let mut g_flat = vec![0.0; flat.len()];
    for it in 0..config.iterations {
        if let Some(t) = truth {
            if it % config.log_every == 0 {
                truth_curve.push(TruthPoint {
                    iteration: it,
                    value: t.measure(&problem.phi_model(&phi)?)?,
                });
            }
        }
        let demo_idx: Vec<Vec<usize>> = problem
            .demos
            .iter()
            .map(|d| draw_batch(&mut rng, d.len(), config.demo_batch))
            .collect();
        let sample_idx: Vec<Vec<usize>> = (0..n_tasks)
            .map(|_| draw_batch(&mut rng, problem.samples.len(), config.penalty_batch))
            .collect();
        g_theta.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
        g_phi.iter_mut().for_each(|g| *g = 0.0);
        let cost = problem.evaluate_batch(
            &thetas,
            &phi,
            config.rho,
            &demo_idx,
            &sample_idx,
            Some((&mut g_theta, &mut g_phi)),
        )?;
        for (dst, src) in g_flat.chunks_mut(per_task).zip(&g_theta) {
            dst.copy_from_slice(src);
        }
        if !cost.total.is_finite() || g_flat.iter().chain(&g_phi).any(|g| !g.is_finite()) {
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
            theta_adam.update(&mut flat, &g_flat)?;
            for (m, src) in thetas.iter_mut().zip(flat.chunks(per_task)) {
                m.params.copy_from_slice(src);
            }
        }
        if move_phi {
            phi_adam.update(phi.params_mut(), &g_phi)?;
        }
    }
    let model = problem.phi_model(&phi)?;
    let mut metrics = BTreeMap::new();
    let last = curve.last().copied().expect("at least one iteration");
    metrics.insert("final_total".to_string(), last.total);
    metrics.insert("final_nll".to_string(), last.nll);
    metrics.insert("final_penalty".to_string(), last.penalty);
    if let Some(t) = truth {
        let value = t.measure(&model)?;
        truth_curve.push(TruthPoint {
            iteration: config.iterations,
            value,
        });
        metrics.insert("dynamics_score".to_string(), value);
    }
    if let DynamicsModel::Linear(l) = &model {
        for (name, v) in crate::models::LINEAR_PARAM_NAMES.iter().zip(l.params) {
            metrics.insert(format!("param_{name}"), v);
        }
    }
    let thetas = thetas.into_iter().map(|m| ModelRecord::from(&QModel::Mlp(m))).collect();
    Ok(TrainArtifact::new(
        config.clone(),
        problem.task_ids.clone(),
        ModelRecord::from(&model),
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

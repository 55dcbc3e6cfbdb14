//! Internal-to-real dynamics transfer: execute the real action whose outcome
//! best matches what the user expects their own action to do.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::envs::{Environment, Outcome};
use crate::error::{invalid, Result};
use crate::models::DynamicsModel;
use crate::numeric::mean_and_standard_error;
use crate::simuser::SimulatedUser;
use crate::soft::{State, TransitionModel};
use crate::util::{parallel_map, stream_rng, worker_count};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferOptions {
    /// Additive smoothing on the real-side probabilities of the discrete KL.
    pub epsilon: f64,
    /// Per-component weights of the squared distance between continuous
    /// predictions.
    pub weights: [f64; 4],
}

impl Default for TransferOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-9,
            weights: [1.0; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssistanceDecision {
    pub user_action: usize,
    pub executed_action: usize,
    /// Divergence of each real action's outcome from the internal prediction.
    pub scores: Vec<f64>,
    /// The user's internally predicted next-state distribution.
    pub predicted: Vec<(State, f64)>,
}

pub fn transfer_action(phi: &DynamicsModel, real: &DynamicsModel, s: &State, a_h: usize) -> Result<AssistanceDecision> {
    transfer_action_with(phi, real, s, a_h, &TransferOptions::default())
}

pub fn transfer_action_with(
    phi: &DynamicsModel,
    real: &DynamicsModel,
    s: &State,
    a_h: usize,
    options: &TransferOptions,
) -> Result<AssistanceDecision> {
    let n = real.action_count();
    if a_h >= n {
        return Err(invalid(format!("user action {a_h} out of range")));
    }
    let predicted = phi.predict(s, a_h)?;
    let scores = (0..n)
        .map(|a| {
            let outcome = real.predict(s, a)?;
            divergence(&predicted, &outcome, options)
        })
        .collect::<Result<Vec<f64>>>()?;
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(invalid(format!("non-finite transfer score {bad}")));
    }
    Ok(AssistanceDecision {
        user_action: a_h,
        executed_action: pick(&scores, a_h),
        scores,
        predicted,
    })
}

/// Argmin with ties (within a relative 1e-12) going to `preferred`, then to
/// the lowest index.
fn pick(scores: &[f64], preferred: usize) -> usize {
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * best.abs().max(1e-300);
    let tied = |v: f64| v - best <= tol;
    if tied(scores[preferred]) {
        return preferred;
    }
    scores.iter().position(|v| tied(*v)).expect("non-empty scores")
}

fn divergence(p: &[(State, f64)], q: &[(State, f64)], options: &TransferOptions) -> Result<f64> {
    match p.first().map(|(s, _)| s) {
        Some(State::Discrete(_)) => {
            let mut kl = 0.0;
            for (s, ps) in p {
                if *ps <= 0.0 {
                    continue;
                }
                let qs: f64 = q.iter().filter(|(t, _)| t == s).map(|(_, w)| w).sum();
                kl += ps * (ps.ln() - (qs + options.epsilon).ln());
            }
            Ok(kl)
        }
        Some(State::Continuous(_)) => {
            let mut d = 0.0;
            for (s, ps) in p {
                let x = s.vector().ok_or_else(|| invalid("mixed state kinds"))?;
                for (t, qt) in q {
                    let y = t.vector().ok_or_else(|| invalid("mixed state kinds"))?;
                    let sq: f64 = (0..4).map(|k| options.weights[k] * (x[k] - y[k]).powi(2)).sum();
                    d += ps * qt * sq;
                }
            }
            Ok(d)
        }
        None => Err(invalid("empty prediction")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssistedStep {
    pub user_action: usize,
    pub executed_action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssistedEpisode {
    pub task_id: usize,
    pub states: Vec<State>,
    pub steps: Vec<AssistedStep>,
    pub outcome: Outcome,
    pub ret: f64,
}

/// One episode of `user` on `task_id`; with `phi` present, every sampled
/// user action is passed through [`transfer_action`] before it reaches the
/// environment.
pub fn run_assisted_episode(
    env: &dyn Environment,
    user: &SimulatedUser,
    task_id: usize,
    phi: Option<&DynamicsModel>,
    rng: &mut dyn RngCore,
) -> Result<AssistedEpisode> {
    let real = env.real_dynamics();
    let mut s = env.reset(task_id, rng);
    let mut states = vec![s];
    let mut steps = Vec::new();
    let mut ret = 0.0;
    for t in 0..env.max_steps() {
        let a_h = user.sample_action(task_id, &s, rng)?;
        let a = match phi {
            Some(phi) => transfer_action(phi, &real, &s, a_h)?.executed_action,
            None => a_h,
        };
        let step = env.step(task_id, &s, a, t);
        ret += step.reward;
        steps.push(AssistedStep {
            user_action: a_h,
            executed_action: a,
            reward: step.reward,
        });
        s = step.next;
        states.push(s);
        if step.done {
            return Ok(AssistedEpisode {
                task_id,
                states,
                steps,
                outcome: step.outcome,
                ret,
            });
        }
    }
    Ok(AssistedEpisode {
        task_id,
        states,
        steps,
        outcome: Outcome::Timeout,
        ret,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssistanceMetrics {
    pub episodes: usize,
    pub success_rate: f64,
    pub out_of_bounds_rate: f64,
    pub timeout_rate: f64,
    pub mean_return: f64,
    pub return_standard_error: Option<f64>,
}

impl AssistanceMetrics {
    pub fn from_episodes(episodes: &[AssistedEpisode]) -> Result<Self> {
        if episodes.is_empty() {
            return Err(invalid("no episodes"));
        }
        let n = episodes.len() as f64;
        let rate = |o: Outcome| episodes.iter().filter(|e| e.outcome == o).count() as f64 / n;
        let returns: Vec<f64> = episodes.iter().map(|e| e.ret).collect();
        let (mean_return, return_standard_error) = mean_and_standard_error(&returns);
        Ok(Self {
            episodes: episodes.len(),
            success_rate: rate(Outcome::Target),
            out_of_bounds_rate: rate(Outcome::OutOfBounds),
            timeout_rate: rate(Outcome::Timeout),
            mean_return,
            return_standard_error,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistanceReport {
    pub unassisted: AssistanceMetrics,
    pub assisted: AssistanceMetrics,
    /// Episodes that succeeded only with assistance, and only without.
    pub assisted_only_successes: usize,
    pub unassisted_only_successes: usize,
    /// Assisted steps whose executed action differs from the user's.
    pub changed_actions: usize,
    pub assisted_steps: usize,
}

/// Paired evaluation: episode `k` runs on `tasks[k % tasks.len()]` from the
/// seed stream `(seed, task, k)` in both conditions, so both start from the
/// same state with the same random draws.
pub fn evaluate_assistance(
    env: &dyn Environment,
    user: &SimulatedUser,
    phi: &DynamicsModel,
    tasks: &[usize],
    episodes: usize,
    seed: u64,
) -> Result<AssistanceReport> {
    if episodes == 0 || tasks.is_empty() {
        return Err(invalid("need at least one episode and one task"));
    }
    let run = |k: usize, phi: Option<&DynamicsModel>| {
        let task = tasks[k % tasks.len()];
        let mut rng = stream_rng(seed, &[task as u64, k as u64]);
        run_assisted_episode(env, user, task, phi, &mut rng)
    };
    let pairs = parallel_map(episodes, worker_count(), |k| Ok((run(k, None)?, run(k, Some(phi))?)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (plain, helped): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let won = |e: &AssistedEpisode| e.outcome == Outcome::Target;
    Ok(AssistanceReport {
        unassisted: AssistanceMetrics::from_episodes(&plain)?,
        assisted: AssistanceMetrics::from_episodes(&helped)?,
        assisted_only_successes: plain.iter().zip(&helped).filter(|(p, h)| !won(p) && won(h)).count(),
        unassisted_only_successes: plain.iter().zip(&helped).filter(|(p, h)| won(p) && !won(h)).count(),
        changed_actions: helped
            .iter()
            .flat_map(|e| &e.steps)
            .filter(|s| s.user_action != s.executed_action)
            .count(),
        assisted_steps: helped.iter().map(|e| e.steps.len()).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_scramble, scrambled_dynamics, GridWorld, PointMass2D, ScrambleMap, ScrambleMode};
    use crate::models::{LinearDynamics, TabularDynamics};
    use crate::simuser::{build_grid_user, UserOptions};

    #[test]
    fn real_phi_is_identity_on_grid() {
        let g = GridWorld::default();
        let real = g.real_dynamics();
        for s in 0..49 {
            for a in 0..4 {
                let d = transfer_action(&real, &real, &State::Discrete(s), a).unwrap();
                assert_eq!(d.executed_action, a);
            }
        }
    }

    #[test]
    fn global_scramble_is_undone() {
        let g = GridWorld::default();
        let real_table = g.real_table();
        // left believed to move down
        let perm = [0, 2, 1, 3];
        let internal = scrambled_dynamics(&real_table, &ScrambleMap::global(perm).unwrap()).unwrap();
        let phi = DynamicsModel::Deterministic(internal.clone());
        let s = g.cell(3, 3);
        let expected = internal.next_state(s, 2);
        let d = transfer_action(&phi, &g.real_dynamics(), &State::Discrete(s), 2).unwrap();
        assert_eq!(real_table.next_state(s, d.executed_action), expected);
        assert_eq!(d.executed_action, 1);
    }

    #[test]
    fn exact_phi_lands_where_the_user_expects() {
        let g = GridWorld::default();
        let real_table = g.real_table();
        let internal = scrambled_dynamics(&real_table, &make_scramble(ScrambleMode::Global, 5, 49)).unwrap();
        let phi = DynamicsModel::Deterministic(internal.clone());
        for s in 0..49 {
            for a in 0..4 {
                let d = transfer_action(&phi, &g.real_dynamics(), &State::Discrete(s), a).unwrap();
                assert_eq!(real_table.next_state(s, d.executed_action), internal.next_state(s, a));
            }
        }
    }

    #[test]
    fn kl_matches_hand_computation() {
        let mut t = TabularDynamics::uniform(1, 2, 3);
        t.logits = vec![0.0, 0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0];
        let phi = DynamicsModel::Tabular(t);
        let real = DynamicsModel::Deterministic(crate::models::DeterministicTable::new(1, 3, 2, vec![0, 2]).unwrap());
        let d = transfer_action(&phi, &real, &State::Discrete(0), 0).unwrap();
        let eps = 1e-9f64;
        let want0 = 0.5 * (0.5f64.ln() - (1.0 + eps).ln()) + 0.5 * (0.5f64.ln() - eps.ln());
        let want1 = 0.5 * (0.5f64.ln() - eps.ln()) + 0.5 * (0.5f64.ln() - eps.ln());
        assert!((d.scores[0] - want0).abs() < 1e-12);
        assert!((d.scores[1] - want1).abs() < 1e-12);
        assert_eq!(d.executed_action, 0);
    }

    #[test]
    fn velocity_belief_brakes_a_moving_mass() {
        let p = PointMass2D::default();
        let phi = DynamicsModel::Linear(LinearDynamics::new([1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap());
        let s = State::Continuous([0.5, 0.5, 0.03, 0.0]);
        // internal: x' = (0.53, 0.51, 0, 0) for "up"; real x' = (0.53, 0.5, 0.03 + u)
        let d = transfer_action(&phi, &p.real_dynamics(), &s, 0).unwrap();
        let real = LinearDynamics::real();
        let want = (0..4)
            .min_by(|a, b| {
                let f = |a: usize| {
                    let y = real.step(&[0.5, 0.5, 0.03, 0.0], a);
                    (y[0] - 0.53).powi(2) + (y[1] - 0.51).powi(2) + y[2].powi(2) + y[3].powi(2)
                };
                f(*a).partial_cmp(&f(*b)).unwrap()
            })
            .unwrap();
        assert_eq!(d.executed_action, want);
        assert_eq!(d.executed_action, 2);
    }

    #[test]
    fn ties_prefer_the_user_action() {
        assert_eq!(pick(&[1.0, 1.0, 1.0, 2.0], 2), 2);
        assert_eq!(pick(&[1.0, 1.0, 1.0, 2.0], 3), 0);
        assert_eq!(pick(&[0.0, 0.0, 3.0, 0.0], 2), 0);
    }

    #[test]
    fn real_phi_reproduces_unassisted_metrics() {
        let g = GridWorld::default();
        let map = make_scramble(ScrambleMode::Global, 2, 49);
        let internal = DynamicsModel::Deterministic(scrambled_dynamics(&g.real_table(), &map).unwrap());
        let user = build_grid_user(&g, internal, &[10, 30], UserOptions::default()).unwrap();
        let r = evaluate_assistance(&g, &user, &g.real_dynamics(), &[10, 30], 40, 3).unwrap();
        assert_eq!(r.assisted, r.unassisted);
        assert_eq!(r.assisted_only_successes, 0);
    }

    #[test]
    fn exact_phi_assistance_fixes_a_scrambled_user() {
        let g = GridWorld::default();
        let map = make_scramble(ScrambleMode::Global, 2, 49);
        let table = scrambled_dynamics(&g.real_table(), &map).unwrap();
        let internal = DynamicsModel::Deterministic(table);
        let user = build_grid_user(&g, internal.clone(), &[10, 30], UserOptions::default()).unwrap();
        let r = evaluate_assistance(&g, &user, &internal, &[10, 30], 60, 3).unwrap();
        assert!(r.assisted.success_rate > 0.9, "{:?}", r.assisted);
        assert!(r.unassisted.success_rate < 0.2, "{:?}", r.unassisted);
    }
}

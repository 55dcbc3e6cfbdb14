//! Maximum causal entropy IRL over a tabular state-reward table, with the
//! demonstrator's behavioural dynamics supplied separately from the real
//! dynamics, and a joint reward-and-dynamics baseline.
//!
//! The behavioural model is the soft-optimal policy of
//! `Q(s,a) = Σ_s' T(s'|s,a) (R(s') + γ V(s'))`. The sink is absorbing and
//! collects `R(sink)` every step on top of the entropy bonus, so
//! `V(sink) = (ln|A| + R(sink)) / (1 − γ)` and a constant shift of `R`
//! leaves the policy unchanged. Gradients of the demo log-likelihood come
//! from the adjoint of the soft Bellman fixed point.

use serde::{Deserialize, Serialize};

use crate::envs::{Environment, GridWorld, Outcome};
use crate::error::{invalid, Error, Result};
use crate::models::{DynamicsModel, TabularDynamics};
use crate::numeric::{log_sum_exp, mean_and_standard_error, softmax_into, StableSum};
use crate::simuser::{rollout, DemoSet};
use crate::soft::{terminal_value, State};
use crate::util::{parallel_map, stream_rng, worker_count};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    pub values: Vec<f64>,
}

impl RewardTable {
    pub fn zeros(state_count: usize) -> Self {
        Self {
            values: vec![0.0; state_count],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrlOptions {
    pub iterations: usize,
    /// Weight of `½‖R‖²` (and of `½‖logits‖²` when dynamics are learned).
    pub l2: f64,
    pub initial_step: f64,
    /// Convergence threshold of the value and adjoint sweeps.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for IrlOptions {
    fn default() -> Self {
        Self {
            iterations: 200,
            l2: 1e-4,
            initial_step: 1.0,
            tolerance: 1e-10,
            max_sweeps: 200_000,
        }
    }
}

/// A finite MDP without rewards: `sources` non-absorbing states, one
/// absorbing sink (the last state) and a dense behavioural transition tensor.
#[derive(Debug, Clone)]
pub struct IrlMdp {
    pub sources: usize,
    pub action_count: usize,
    pub discount: f64,
    /// `[source × action × state]`.
    pub transitions: Vec<f64>,
}

impl IrlMdp {
    pub fn from_dynamics(dynamics: &DynamicsModel, sources: usize, discount: f64) -> Result<Self> {
        let a_n = dynamics.action_count();
        let n = sources + 1;
        let mut transitions = Vec::with_capacity(sources * a_n * n);
        for s in 0..sources {
            for a in 0..a_n {
                transitions.extend(dynamics.distribution(s, a, n)?);
            }
        }
        Ok(Self {
            sources,
            action_count: a_n,
            discount,
            transitions,
        })
    }

    pub fn for_grid(env: &GridWorld, dynamics: &DynamicsModel) -> Result<Self> {
        Self::from_dynamics(dynamics, env.cell_count(), env.discount)
    }

    pub fn state_count(&self) -> usize {
        self.sources + 1
    }

    fn sink_value(&self, reward: &[f64]) -> f64 {
        let base = terminal_value(self.action_count, self.discount);
        base + reward[self.sources] / (1.0 - self.discount)
    }
}

/// Converged soft values and the induced policy.
#[derive(Debug, Clone)]
pub struct SoftSolution {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub policy: Vec<f64>,
    pub sweeps: usize,
}

/// Soft value iteration for `reward` under `mdp`, warm-started from `start`.
pub fn solve(mdp: &IrlMdp, reward: &[f64], start: Option<&[f64]>, tol: f64, max_sweeps: usize) -> Result<SoftSolution> {
    let (src, a_n, n) = (mdp.sources, mdp.action_count, mdp.state_count());
    if reward.len() != n {
        return Err(invalid(format!("reward has {} entries, expected {n}", reward.len())));
    }
    if mdp.discount >= 1.0 {
        return Err(Error::Config("IRL needs a discount below 1".into()));
    }
    let gamma = mdp.discount;
    let mut v = vec![0.0; n];
    v[src] = mdp.sink_value(reward);
    match start {
        Some(s) if s.len() == src => v[..src].copy_from_slice(s),
        _ => {
            let sink = v[src];
            v[..src].fill(sink);
        }
    }
    let mut q = vec![0.0; src * a_n];
    let target: Vec<f64> = (0..n).map(|j| reward[j]).collect();
    for sweep in 1..=max_sweeps {
        let mut change = 0.0f64;
        for s in 0..src {
            for a in 0..a_n {
                let row = &mdp.transitions[(s * a_n + a) * n..(s * a_n + a + 1) * n];
                let mut acc = 0.0;
                for j in 0..n {
                    if row[j] != 0.0 {
                        acc += row[j] * (target[j] + gamma * v[j]);
                    }
                }
                q[s * a_n + a] = acc;
            }
            let nv = log_sum_exp(&q[s * a_n..(s + 1) * a_n]);
            change = change.max((nv - v[s]).abs());
            v[s] = nv;
        }
        if !change.is_finite() {
            return Err(Error::Divergence {
                iteration: sweep,
                detail: "non-finite soft value".into(),
            });
        }
        if change <= tol {
            let mut policy = vec![0.0; src * a_n];
            for s in 0..src {
                softmax_into(&q[s * a_n..(s + 1) * a_n], &mut policy[s * a_n..(s + 1) * a_n]);
            }
            return Ok(SoftSolution {
                q,
                v,
                policy,
                sweeps: sweep,
            });
        }
    }
    Err(Error::Convergence {
        iterations: max_sweeps,
        residual: f64::NAN,
    })
}

/// Demo statistics for one task: `[source × action]` counts.
#[derive(Debug, Clone)]
pub struct DemoCounts {
    pub counts: Vec<f64>,
    pub total: f64,
}

impl DemoCounts {
    pub fn new(demos: &DemoSet, mdp: &IrlMdp) -> Result<Self> {
        let counts = demos.action_counts(mdp.sources, mdp.action_count)?;
        let total: f64 = counts.iter().sum();
        if total == 0.0 {
            return Err(invalid("no demo transitions"));
        }
        Ok(Self { counts, total })
    }
}

/// Mean demo log-likelihood minus the L2 terms, with gradients with respect
/// to the reward and (optionally) the dynamics logits.
pub struct Evaluation {
    pub objective: f64,
    pub log_likelihood: f64,
    pub grad_reward: Vec<f64>,
    pub grad_logits: Option<Vec<f64>>,
    pub solution: SoftSolution,
}

pub fn evaluate(
    mdp: &IrlMdp,
    demos: &DemoCounts,
    reward: &[f64],
    logits: Option<&[f64]>,
    options: &IrlOptions,
    warm: Option<&[f64]>,
) -> Result<Evaluation> {
    let (src, a_n, n) = (mdp.sources, mdp.action_count, mdp.state_count());
    let gamma = mdp.discount;
    let sol = solve(mdp, reward, warm, options.tolerance, options.max_sweeps)?;
    let mut ll = StableSum::new();
    let mut g = vec![0.0; src * a_n];
    for s in 0..src {
        let row = &demos.counts[s * a_n..(s + 1) * a_n];
        let visits: f64 = row.iter().sum();
        if visits == 0.0 {
            continue;
        }
        for a in 0..a_n {
            if row[a] > 0.0 {
                ll.add(row[a] * (sol.q[s * a_n + a] - sol.v[s]));
            }
            g[s * a_n + a] = (row[a] - visits * sol.policy[s * a_n + a]) / demos.total;
        }
    }
    let log_likelihood = ll.value() / demos.total;
    // adjoint: λ = g + γ diag(π) Pᵀ λ over source states
    let mut lambda = g.clone();
    let mut inflow = vec![0.0; n];
    let mut converged = false;
    for _ in 0..options.max_sweeps {
        inflow.iter_mut().for_each(|x| *x = 0.0);
        for sa in 0..src * a_n {
            let l = lambda[sa];
            if l == 0.0 {
                continue;
            }
            let row = &mdp.transitions[sa * n..(sa + 1) * n];
            for j in 0..n {
                inflow[j] += l * row[j];
            }
        }
        let mut change = 0.0f64;
        for s in 0..src {
            for a in 0..a_n {
                let sa = s * a_n + a;
                let nl = g[sa] + gamma * sol.policy[sa] * inflow[s];
                change = change.max((nl - lambda[sa]).abs());
                lambda[sa] = nl;
            }
        }
        if change <= options.tolerance * 1e-2 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            iterations: options.max_sweeps,
            residual: f64::NAN,
        });
    }
    inflow.iter_mut().for_each(|x| *x = 0.0);
    for sa in 0..src * a_n {
        let row = &mdp.transitions[sa * n..(sa + 1) * n];
        for j in 0..n {
            inflow[j] += lambda[sa] * row[j];
        }
    }
    let mut grad_reward = inflow.clone();
    grad_reward[src] /= 1.0 - gamma;
    let mut penalty = 0.0;
    for (gr, r) in grad_reward.iter_mut().zip(reward) {
        *gr -= options.l2 * r;
        penalty += 0.5 * options.l2 * r * r;
    }
    let grad_logits = match logits {
        None => None,
        Some(logits) => {
            let mut out = vec![0.0; logits.len()];
            let mut gp = vec![0.0; n];
            for sa in 0..src * a_n {
                let row = &mdp.transitions[sa * n..(sa + 1) * n];
                for j in 0..n {
                    gp[j] = lambda[sa] * (reward[j] + gamma * sol.v[j]);
                }
                crate::numeric::softmax_backward(row, &gp, &mut out[sa * n..(sa + 1) * n]);
            }
            for (o, l) in out.iter_mut().zip(logits) {
                *o -= options.l2 * l;
                penalty += 0.5 * options.l2 * l * l;
            }
            Some(out)
        }
    };
    Ok(Evaluation {
        objective: log_likelihood - penalty,
        log_likelihood,
        grad_reward,
        grad_logits,
        solution: sol,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrlResult {
    pub reward: RewardTable,
    /// Learned behavioural dynamics, for the joint baseline.
    pub dynamics: Option<TabularDynamics>,
    /// Objective after every accepted step, starting with the initial value.
    pub objective_curve: Vec<f64>,
    pub log_likelihood: f64,
}

/// Gradient ascent with backtracking: a step is taken only if it does not
/// lower the objective.
///
/// With `prior` logits the dynamics are learned as an offset from them and
/// the L2 term applies to the offset.
fn ascend(demos: &DemoSet, mut mdp: IrlMdp, prior: Option<Vec<f64>>, options: &IrlOptions) -> Result<IrlResult> {
    let counts = DemoCounts::new(demos, &mdp)?;
    let mut logits = prior.as_ref().map(|p| vec![0.0; p.len()]);
    let n = mdp.state_count();
    let mut reward = vec![0.0; n];
    let mut current = evaluate(&mdp, &counts, &reward, logits.as_deref(), options, None)?;
    let mut curve = vec![current.objective];
    let mut step = options.initial_step;
    for _ in 0..options.iterations {
        let mut accepted = false;
        for _ in 0..40 {
            let cand_reward: Vec<f64> = reward
                .iter()
                .zip(&current.grad_reward)
                .map(|(r, g)| r + step * g)
                .collect();
            let cand_logits = logits.as_ref().map(|l| {
                l.iter()
                    .zip(current.grad_logits.as_ref().expect("logit gradient"))
                    .map(|(x, g)| x + step * g)
                    .collect::<Vec<f64>>()
            });
            let cand_mdp = match (&cand_logits, &prior) {
                (Some(l), Some(p)) => with_logits(&mdp, &offset(p, l)),
                _ => mdp.clone(),
            };
            let warm = current.solution.v[..mdp.sources].to_vec();
            let trial = evaluate(&cand_mdp, &counts, &cand_reward, cand_logits.as_deref(), options, Some(&warm));
            match trial {
                Ok(e) if e.objective >= current.objective => {
                    reward = cand_reward;
                    logits = cand_logits;
                    mdp = cand_mdp;
                    current = e;
                    accepted = true;
                    step *= 1.5;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break;
        }
        curve.push(current.objective);
    }
    let dynamics = logits.zip(prior).map(|(l, p)| TabularDynamics {
        source_count: mdp.sources,
        action_count: mdp.action_count,
        state_count: n,
        logits: offset(&p, &l),
    });
    Ok(IrlResult {
        reward: RewardTable { values: reward },
        dynamics,
        objective_curve: curve,
        log_likelihood: current.log_likelihood,
    })
}

fn offset(prior: &[f64], delta: &[f64]) -> Vec<f64> {
    prior.iter().zip(delta).map(|(p, d)| p + d).collect()
}

pub fn with_logits(mdp: &IrlMdp, logits: &[f64]) -> IrlMdp {
    let n = mdp.state_count();
    let mut transitions = vec![0.0; logits.len()];
    for (row, out) in logits.chunks(n).zip(transitions.chunks_mut(n)) {
        softmax_into(row, out);
    }
    IrlMdp {
        transitions,
        ..mdp.clone()
    }
}

/// Learns a state reward from `demos` assuming the demonstrator is
/// soft-optimal under `behavior`.
pub fn maxcausalent_irl(demos: &DemoSet, behavior: &DynamicsModel, sources: usize, discount: f64, options: &IrlOptions) -> Result<IrlResult> {
    let mdp = IrlMdp::from_dynamics(behavior, sources, discount)?;
    ascend(demos, mdp, None, options)
}

pub const SERD_SMOOTHING: f64 = 0.1;

/// Joint estimate of reward and tabular behavioural dynamics by maximising
/// the same likelihood over both, starting from the real dynamics mixed
/// with [`SERD_SMOOTHING`] of the uniform distribution. With
/// `learn_dynamics` off it runs [`maxcausalent_irl`] with the real dynamics.
pub fn serd_joint_baseline(
    demos: &DemoSet,
    real: &DynamicsModel,
    sources: usize,
    discount: f64,
    options: &IrlOptions,
    learn_dynamics: bool,
) -> Result<IrlResult> {
    if !learn_dynamics {
        return maxcausalent_irl(demos, real, sources, discount, options);
    }
    let base = IrlMdp::from_dynamics(real, sources, discount)?;
    let n = base.state_count();
    let logits: Vec<f64> = base
        .transitions
        .iter()
        .map(|p| ((1.0 - SERD_SMOOTHING) * p + SERD_SMOOTHING / n as f64).ln())
        .collect();
    let mdp = with_logits(&base, &logits);
    ascend(demos, mdp, Some(logits), options)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnEstimate {
    pub mean: f64,
    pub standard_error: Option<f64>,
    pub success_rate: f64,
    pub episodes: usize,
}

/// Mean true return of `choose` over `episodes` rollouts on `task_id`;
/// episode `k` draws from the stream `(seed, task, k)`.
pub fn estimate_return<F>(env: &dyn Environment, task_id: usize, episodes: usize, seed: u64, choose: F) -> Result<ReturnEstimate>
where
    F: Fn(&State, &mut dyn rand::RngCore) -> Result<usize> + Sync,
{
    if episodes == 0 {
        return Err(invalid("need at least one episode"));
    }
    let runs = parallel_map(episodes, worker_count(), |k| {
        let mut rng = stream_rng(seed, &[task_id as u64, k as u64]);
        rollout(env, task_id, &mut rng, &choose).map(|(_, o, r)| (o, r))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let returns: Vec<f64> = runs.iter().map(|(_, r)| *r).collect();
    let (mean, standard_error) = mean_and_standard_error(&returns);
    Ok(ReturnEstimate {
        mean,
        standard_error,
        success_rate: runs.iter().filter(|(o, _)| *o == Outcome::Target).count() as f64 / episodes as f64,
        episodes,
    })
}

/// True return of the soft-optimal policy for `r_hat` under the real grid
/// dynamics.
pub fn evaluate_reward_recovery(
    r_hat: &RewardTable,
    env: &GridWorld,
    task_id: usize,
    episodes: usize,
    seed: u64,
) -> Result<ReturnEstimate> {
    let mdp = IrlMdp::for_grid(env, &env.real_dynamics())?;
    let options = IrlOptions::default();
    let sol = solve(&mdp, &r_hat.values, None, options.tolerance, options.max_sweeps)?;
    let a_n = mdp.action_count;
    estimate_return(env, task_id, episodes, seed, |s, rng| {
        let i = s.index().ok_or_else(|| invalid("grid state expected"))?;
        Ok(crate::simuser::sample_index(&sol.policy[i * a_n..(i + 1) * a_n], rng))
    })
}

/// True return of the uniformly random policy.
pub fn random_policy_return(env: &dyn Environment, task_id: usize, episodes: usize, seed: u64) -> Result<ReturnEstimate> {
    let a_n = env.action_count();
    let probs = vec![1.0 / a_n as f64; a_n];
    estimate_return(env, task_id, episodes, seed, |_, rng| Ok(crate::simuser::sample_index(&probs, rng)))
}

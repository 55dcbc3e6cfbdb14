//! Experiment pipelines: corrupt the user's dynamics, simulate the user,
//! collect demos, train, evaluate. Every random draw comes from a named
//! stream of the run seed.

use rand::seq::SliceRandom;
use rand::Rng;

use super::config::{AssistSettings, GridCondition, IrlSettings, PointMassSettings};
use crate::envs::{make_scramble, scrambled_dynamics, Environment, GridWorld, PointMass2D, ScrambleMode};
use crate::error::{invalid, Result};
use crate::irl::{
    estimate_return, evaluate_reward_recovery, maxcausalent_irl, random_policy_return, serd_joint_baseline,
    ReturnEstimate,
};
use crate::isql::continuous::{train_continuous, vector_pairs, ContinuousProblem};
use crate::isql::{
    constraint_states, global_permutation_ceiling, support_within_reachability, train_tabular, DynamicsFamily,
    IsqlConfig, TabularProblem, TrainArtifact, Truth,
};
use crate::models::{DeterministicTable, DynamicsModel, LinearDynamics};
use crate::simuser::{
    build_grid_user, build_pointmass_user, collect_demos, enumerate_grid_constraints, sample_constraints,
    SimulatedUser, UserOptions,
};
use crate::transfer::{evaluate_assistance, AssistanceReport};
use crate::util::{derive_seed, stream_rng};

const SCRAMBLE: u64 = 1;
const TASKS: u64 = 2;
const DEMOS: u64 = 3;
const CONSTRAINTS: u64 = 4;
const CANDIDATES: u64 = 5;
const IRL_TASKS: u64 = 6;
const IRL_DEMOS: u64 = 7;
const EVAL: u64 = 8;

/// `n` of the `total` task ids, sorted; all of them when `n == total`.
pub fn choose_tasks(total: usize, n: usize, seed: u64, stream: u64) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(invalid(format!("cannot choose {n} of {total} tasks")));
    }
    let mut ids: Vec<usize> = (0..total).collect();
    ids.shuffle(&mut stream_rng(seed, &[TASKS, stream]));
    let mut out = ids[..n].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// The scrambled internal dynamics of a grid user.
pub fn grid_internal(grid: &GridWorld, mode: ScrambleMode, seed: u64) -> Result<DeterministicTable> {
    let map = make_scramble(mode, derive_seed(seed, &[SCRAMBLE]), grid.cell_count());
    scrambled_dynamics(&grid.real_table(), &map)
}

/// Fits φ for a grid user from demos on `tasks`.
pub fn learn_grid_phi(
    grid: &GridWorld,
    user: &SimulatedUser,
    truth: &DeterministicTable,
    tasks: &[usize],
    demos_per_task: usize,
    isql: &IsqlConfig,
    seed: u64,
) -> Result<TrainArtifact> {
    let demo_seed = derive_seed(seed, &[DEMOS]);
    let demos = tasks
        .iter()
        .map(|t| collect_demos(user, grid, *t, demos_per_task, demo_seed))
        .collect::<Result<Vec<_>>>()?;
    let specs: Vec<_> = tasks.iter().map(|t| grid.task(*t)).collect();
    let samples = constraint_states(&enumerate_grid_constraints(grid));
    let problem = TabularProblem::new(grid.real_table(), &specs, &demos, &samples)?;
    let config = IsqlConfig {
        seed,
        ..isql.clone()
    };
    train_tabular(&problem, &config, Some(&Truth::Table(truth.clone())))
}

#[derive(Debug, Clone)]
pub struct GridRunResult {
    pub condition: GridCondition,
    pub tasks: usize,
    pub seed: u64,
    pub accuracy: f64,
    /// Best accuracy of any global relabelling of the real dynamics.
    pub ceiling: f64,
    /// Fraction of `(s, a)` whose φ support lies within one real step.
    pub support_within_reach: f64,
    pub artifact: TrainArtifact,
}

pub fn grid_scramble_run(
    grid: &GridWorld,
    isql: &IsqlConfig,
    condition: GridCondition,
    n_tasks: usize,
    demos_per_task: usize,
    seed: u64,
) -> Result<GridRunResult> {
    let truth = grid_internal(grid, condition.scramble, seed)?;
    let tasks = choose_tasks(grid.cell_count(), n_tasks, seed, n_tasks as u64)?;
    let user = build_grid_user(grid, DynamicsModel::Deterministic(truth.clone()), &tasks, UserOptions::default())?;
    let config = IsqlConfig {
        family: if condition.action_intent {
            DynamicsFamily::ActionIntent
        } else {
            isql.family
        },
        ..isql.clone()
    };
    let artifact = learn_grid_phi(grid, &user, &truth, &tasks, demos_per_task, &config, seed)?;
    let phi = artifact.phi_model()?;
    let real = grid.real_table();
    Ok(GridRunResult {
        condition,
        tasks: n_tasks,
        seed,
        accuracy: artifact.dynamics_score().unwrap_or(f64::NAN),
        ceiling: global_permutation_ceiling(&real, &truth)?,
        support_within_reach: support_within_reachability(&phi, &real, 1e-12)?,
        artifact,
    })
}

#[derive(Debug, Clone)]
pub struct PointMassRunResult {
    pub seed: u64,
    pub family: DynamicsFamily,
    /// Learned parameters (linear family).
    pub params: Option<[f64; 8]>,
    /// Candidate set, truth position, learned weights (mixture family).
    pub candidates: Vec<LinearDynamics>,
    pub truth_index: Option<usize>,
    pub weights: Vec<f64>,
    pub artifact: TrainArtifact,
}

impl PointMassRunResult {
    pub fn argmax_candidate(&self) -> Option<usize> {
        if self.weights.is_empty() {
            return None;
        }
        Some(crate::numeric::argmax(&self.weights))
    }
}

/// `k − 1` uniform candidates plus the truth at a seeded position.
pub fn mixture_candidates(truth: LinearDynamics, k: usize, seed: u64) -> (Vec<LinearDynamics>, usize) {
    let mut rng = stream_rng(seed, &[CANDIDATES]);
    let at = rng.gen_range(0..k);
    let candidates = (0..k)
        .map(|j| {
            if j == at {
                truth
            } else {
                LinearDynamics {
                    params: std::array::from_fn(|_| rng.gen::<f64>()),
                }
            }
        })
        .collect();
    (candidates, at)
}

/// Velocity-belief (or configured) user on the point-mass, and its demos
/// and constraints, fitted by the continuous trainer.
pub fn pointmass_run(
    env: &PointMass2D,
    settings: &PointMassSettings,
    isql: &IsqlConfig,
    seed: u64,
) -> Result<PointMassRunResult> {
    let internal = LinearDynamics::new(settings.internal)?;
    let tasks = choose_tasks(env.lattice * env.lattice, settings.tasks, seed, settings.tasks as u64)?;
    let user = build_pointmass_user(env, DynamicsModel::Linear(internal), &tasks, UserOptions::default())?;
    let demo_seed = derive_seed(seed, &[DEMOS]);
    let demos = tasks
        .iter()
        .map(|t| collect_demos(&user, env, *t, settings.demos_per_task, demo_seed))
        .collect::<Result<Vec<_>>>()?;
    let samples = vector_pairs(&sample_constraints(env, settings.rollouts, derive_seed(seed, &[CONSTRAINTS]))?)?;
    let specs = tasks.iter().map(|t| env.point_task(*t)).collect();
    let config = IsqlConfig {
        seed,
        family: settings.family,
        ..isql.clone()
    };
    let (candidates, truth_index) = match settings.family {
        DynamicsFamily::CategoricalMixture => {
            let (c, at) = mixture_candidates(internal, settings.candidates, seed);
            (c, Some(at))
        }
        _ => (Vec::new(), None),
    };
    let problem = ContinuousProblem::new(tasks, specs, env.discount, &demos, samples, candidates.clone())?;
    let truth = match truth_index {
        Some(k) => Truth::Candidate(k),
        None => Truth::Linear(internal),
    };
    let artifact = train_continuous(&problem, &config, Some(&truth))?;
    let (params, weights) = match artifact.phi_model()? {
        DynamicsModel::Linear(l) => (Some(l.params), Vec::new()),
        DynamicsModel::Mixture(m) => (None, m.weights()),
        other => return Err(invalid(format!("unexpected {} φ", other.family()))),
    };
    Ok(PointMassRunResult {
        seed,
        family: settings.family,
        params,
        candidates,
        truth_index,
        weights,
        artifact,
    })
}

pub const IRL_CONDITIONS: [&str; 5] = ["random", "serd", "real_dynamics", "learned_phi", "soft_optimal"];

#[derive(Debug, Clone, PartialEq)]
pub struct IrlRow {
    pub seed: u64,
    pub task: usize,
    pub condition: &'static str,
    pub estimate: ReturnEstimate,
}

#[derive(Debug, Clone)]
pub struct IrlSeedResult {
    pub seed: u64,
    pub phi_accuracy: f64,
    pub rows: Vec<IrlRow>,
}

/// One seed of the misguided-demonstration experiment: learn φ on known-
/// reward tasks, then infer rewards on other tasks under each behaviour
/// model and score the resulting policies by true return.
pub fn irl_misguided_seed(grid: &GridWorld, settings: &IrlSettings, isql: &IsqlConfig, seed: u64) -> Result<IrlSeedResult> {
    let truth = grid_internal(grid, ScrambleMode::Global, seed)?;
    let cells = grid.cell_count();
    let training = choose_tasks(cells, settings.training_tasks, seed, settings.training_tasks as u64)?;
    let targets = choose_tasks(cells, settings.tasks, seed, IRL_TASKS)?;
    let mut all = training.clone();
    all.extend(&targets);
    all.sort_unstable();
    all.dedup();
    let internal = DynamicsModel::Deterministic(truth.clone());
    let user = build_grid_user(grid, internal, &all, UserOptions::default())?;
    let artifact = learn_grid_phi(grid, &user, &truth, &training, settings.training_demos_per_task, isql, seed)?;
    let phi = artifact.phi_model()?;
    let real = grid.real_dynamics();
    let optimal = build_grid_user(grid, real.clone(), &targets, UserOptions::default())?;
    let options = settings.options();
    let eval_seed = derive_seed(seed, &[EVAL]);
    let mut rows = Vec::new();
    for &task in &targets {
        let demos = collect_demos(&user, grid, task, settings.demos_per_task, derive_seed(seed, &[IRL_DEMOS]))?;
        let recovered = |r: &crate::irl::RewardTable| {
            evaluate_reward_recovery(r, grid, task, settings.eval_episodes, eval_seed)
        };
        let serd = serd_joint_baseline(&demos, &real, cells, grid.discount, &options, true)?;
        let standard = maxcausalent_irl(&demos, &real, cells, grid.discount, &options)?;
        let learned = maxcausalent_irl(&demos, &phi, cells, grid.discount, &options)?;
        let benchmark = estimate_return(grid, task, settings.eval_episodes, eval_seed, |s, rng| {
            optimal.sample_action(task, s, rng)
        })?;
        let estimates = [
            random_policy_return(grid, task, settings.eval_episodes, eval_seed)?,
            recovered(&serd.reward)?,
            recovered(&standard.reward)?,
            recovered(&learned.reward)?,
            benchmark,
        ];
        for (condition, estimate) in IRL_CONDITIONS.iter().zip(estimates) {
            rows.push(IrlRow {
                seed,
                task,
                condition,
                estimate,
            });
        }
    }
    Ok(IrlSeedResult {
        seed,
        phi_accuracy: artifact.dynamics_score().unwrap_or(f64::NAN),
        rows,
    })
}

#[derive(Debug, Clone)]
pub struct AssistResult {
    pub seed: u64,
    /// Assistance with the learned φ.
    pub learned: AssistanceReport,
    /// Assistance with φ = real dynamics.
    pub identity: AssistanceReport,
    /// Success rate of a user whose internal model is the real dynamics
    /// (grid only).
    pub reference_success: Option<f64>,
    /// Dynamics score of the learned φ against the user's true internal
    /// model (accuracy on the grid, L2 error on the point-mass).
    pub phi_score: f64,
}

pub fn assist_grid(
    grid: &GridWorld,
    settings: &AssistSettings,
    isql: &IsqlConfig,
    seed: u64,
    artifact: Option<&TrainArtifact>,
) -> Result<AssistResult> {
    let truth = grid_internal(grid, ScrambleMode::Global, seed)?;
    let tasks = choose_tasks(grid.cell_count(), settings.tasks, seed, settings.tasks as u64)?;
    let user = build_grid_user(grid, DynamicsModel::Deterministic(truth.clone()), &tasks, UserOptions::default())?;
    let trained;
    let artifact = match artifact {
        Some(a) => a,
        None => {
            trained = learn_grid_phi(grid, &user, &truth, &tasks, settings.demos_per_task, isql, seed)?;
            &trained
        }
    };
    let phi = artifact.phi_model()?;
    let real = grid.real_dynamics();
    let eval_seed = derive_seed(seed, &[EVAL]);
    let learned = evaluate_assistance(grid, &user, &phi, &tasks, settings.episodes, eval_seed)?;
    let identity = evaluate_assistance(grid, &user, &real, &tasks, settings.episodes, eval_seed)?;
    let uncorrupted = build_grid_user(grid, real.clone(), &tasks, UserOptions::default())?;
    let reference = evaluate_assistance(grid, &uncorrupted, &real, &tasks, settings.episodes, eval_seed)?;
    Ok(AssistResult {
        seed,
        learned,
        identity,
        reference_success: Some(reference.unassisted.success_rate),
        phi_score: Truth::Table(truth).measure(&phi)?,
    })
}

pub fn assist_pointmass(
    env: &PointMass2D,
    settings: &AssistSettings,
    run: &PointMassSettings,
    isql: &IsqlConfig,
    seed: u64,
    artifact: Option<&TrainArtifact>,
) -> Result<AssistResult> {
    let internal = LinearDynamics::new(run.internal)?;
    let targets = env.lattice * env.lattice;
    let tasks = choose_tasks(targets, settings.tasks, seed, settings.tasks as u64)?;
    let trained;
    let artifact = match artifact {
        Some(a) => a,
        None => {
            let fit = PointMassSettings {
                tasks: settings.tasks,
                demos_per_task: settings.demos_per_task,
                family: DynamicsFamily::Linear,
                ..run.clone()
            };
            trained = pointmass_run(env, &fit, isql, seed)?.artifact;
            &trained
        }
    };
    let phi = artifact.phi_model()?;
    let user = build_pointmass_user(env, DynamicsModel::Linear(internal), &tasks, UserOptions::default())?;
    let eval_seed = derive_seed(seed, &[EVAL]);
    let learned = evaluate_assistance(env, &user, &phi, &tasks, settings.episodes, eval_seed)?;
    let identity = evaluate_assistance(env, &user, &env.real_dynamics(), &tasks, settings.episodes, eval_seed)?;
    Ok(AssistResult {
        seed,
        learned,
        identity,
        reference_success: None,
        phi_score: match &phi {
            DynamicsModel::Linear(l) => l.l2_distance(&internal),
            _ => f64::NAN,
        },
    })
}

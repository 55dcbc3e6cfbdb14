//! Oracle and gradient suites shared by the integration tests and the
//! acceptance report.
#![allow(dead_code)]

use std::sync::Arc;

use isql::envs::{Environment, GridWorld, PointMass2D};
use isql::irl::{evaluate, with_logits, DemoCounts, IrlMdp, IrlOptions};
use isql::isql::continuous::{vector_pairs, ContinuousPhi};
use isql::isql::tabular::{phi_params, phi_params_mut};
use isql::isql::{constraint_states, ContinuousProblem, DynamicsFamily, TabularProblem};
use isql::models::grad::{check_gradient, FnObjective};
use isql::models::{DynamicsModel, IntentModel, LinearDynamics, MlpQ};
use isql::simuser::{
    build_grid_user, build_pointmass_user, collect_demos, enumerate_grid_constraints, sample_constraints, DemoSet,
    UserOptions,
};
use isql::soft::{
    policy_from_q, soft_bellman_error, soft_value, soft_value_iteration, FnReward, State, TabularMdp, TaskSpec,
    TransitionModel,
};
use isql::util::stream_rng;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Dense tabular dynamics as a transition model.
struct Tensor<'a>(&'a TabularMdp);

impl TransitionModel for Tensor<'_> {
    fn predict(&self, s: &State, a: usize) -> isql::error::Result<Vec<(State, f64)>> {
        let m = self.0;
        let i = s.index().unwrap();
        let base = (i * m.action_count + a) * m.state_count;
        Ok((0..m.state_count)
            .map(|j| (State::Discrete(j), m.transitions[base + j]))
            .collect())
    }
}

pub fn random_mdp(seed: u64) -> TabularMdp {
    let mut rng = stream_rng(seed, &[0x0a]);
    let n = rng.gen_range(2..=10);
    let a_n = rng.gen_range(2..=4);
    let mut transitions = Vec::with_capacity(n * a_n * n);
    for _ in 0..n * a_n {
        let raw: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.4) { 0.0 } else { rng.gen::<f64>() }).collect();
        let total: f64 = raw.iter().sum();
        if total == 0.0 {
            let j = rng.gen_range(0..n);
            transitions.extend((0..n).map(|k| f64::from(u8::from(k == j))));
        } else {
            transitions.extend(raw.iter().map(|p| p / total));
        }
    }
    let rewards = (0..n * a_n * n).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let terminal = (0..n).map(|_| rng.gen_bool(0.2)).collect();
    let discount = rng.gen_range(0.5..0.95);
    TabularMdp::new(n, a_n, transitions, rewards, terminal, discount).unwrap()
}

/// Largest |soft Bellman error| of soft value iteration's output, measured
/// by the library's error function and by a direct recomputation.
pub fn bellman_oracle(seed: u64) -> (f64, f64) {
    let mdp = random_mdp(seed);
    let q = soft_value_iteration(&mdp, 1e-10, 100_000).unwrap();
    let (n, a_n) = (mdp.state_count, mdp.action_count);
    let m = Arc::new(mdp.clone());
    let (mr, mt) = (Arc::clone(&m), Arc::clone(&m));
    let reward = FnReward {
        reward: move |s: &State, a: usize, next: &State| {
            mr.rewards[(s.index().unwrap() * mr.action_count + a) * mr.state_count + next.index().unwrap()]
        },
        terminal: move |s: &State| mt.terminal[s.index().unwrap()],
    };
    let task = TaskSpec::new(0, Arc::new(reward), mdp.discount, a_n).unwrap();
    let v_term = (a_n as f64).ln() / (1.0 - mdp.discount);
    let v = |s: usize| -> f64 {
        if mdp.terminal[s] {
            v_term
        } else {
            let row = &q.values[s * a_n..(s + 1) * a_n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
        }
    };
    let (mut lib, mut direct) = (0.0f64, 0.0f64);
    for s in 0..n {
        for a in 0..a_n {
            lib = lib.max(soft_bellman_error(&q, &Tensor(&mdp), &task, &State::Discrete(s), a).unwrap().abs());
            let target = if mdp.terminal[s] {
                mdp.discount * v_term
            } else {
                (0..n)
                    .map(|j| {
                        let k = (s * a_n + a) * n + j;
                        mdp.transitions[k] * (mdp.rewards[k] + mdp.discount * v(j))
                    })
                    .sum()
            };
            direct = direct.max((q.values[s * a_n + a] - target).abs());
        }
    }
    (lib, direct)
}

/// Policy and soft-value identities on one random Q vector; returns the
/// largest violation.
pub fn identity_violation(seed: u64) -> f64 {
    let mut rng = stream_rng(seed, &[0x1d]);
    let len = rng.gen_range(1..=8);
    let scale = [1.0, 50.0, 1e4][rng.gen_range(0..3)];
    let q: Vec<f64> = (0..len).map(|_| rng.gen_range(-scale..scale)).collect();
    let shift = rng.gen_range(-1e3..1e3);
    let pi = policy_from_q(&q).unwrap().probs;
    let shifted: Vec<f64> = q.iter().map(|x| x + shift).collect();
    let pi2 = policy_from_q(&shifted).unwrap().probs;
    let v = soft_value(&q).unwrap();
    let v2 = soft_value(&shifted).unwrap();
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut worst = (pi.iter().sum::<f64>() - 1.0).abs();
    for (a, b) in pi.iter().zip(&pi2) {
        worst = worst.max((a - b).abs());
    }
    worst = worst.max(pi.iter().map(|p| (-p).max(0.0)).fold(0.0, f64::max));
    worst = worst.max(((v2 - v) - shift).abs() / (1.0 + v.abs() + shift.abs()));
    worst = worst.max((max - v).max(0.0));
    worst = worst.max((v - max - (len as f64).ln()).max(0.0));
    for (a, p) in pi.iter().enumerate() {
        let expected = (q[a] - v).exp();
        worst = worst.max((p - expected).abs());
    }
    worst
}

#[derive(Debug, Clone)]
pub struct FamilyCheck {
    pub family: &'static str,
    pub seeds: usize,
    pub passed: usize,
    pub worst: f64,
}

impl FamilyCheck {
    fn new(family: &'static str) -> Self {
        Self {
            family,
            seeds: 0,
            passed: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, err: f64) {
        self.seeds += 1;
        self.passed += usize::from(err <= FD_TOL);
        self.worst = self.worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
}

fn small_grid() -> GridWorld {
    GridWorld {
        width: 3,
        height: 3,
        ..GridWorld::default()
    }
}

pub fn tabular_problem() -> TabularProblem {
    let env = small_grid();
    let ids = [2, 6];
    let tasks: Vec<TaskSpec> = ids.iter().map(|t| env.task(*t)).collect();
    let user = build_grid_user(&env, env.real_dynamics(), &ids, UserOptions::default()).unwrap();
    let demos: Vec<DemoSet> = ids.iter().map(|t| collect_demos(&user, &env, *t, 4, 1).unwrap()).collect();
    let samples = constraint_states(&enumerate_grid_constraints(&env));
    TabularProblem::new(env.real_table(), &tasks, &demos, &samples).unwrap()
}

pub fn continuous_problem(candidates: Vec<LinearDynamics>) -> ContinuousProblem {
    let env = PointMass2D::default();
    let internal = DynamicsModel::Linear(LinearDynamics::new([1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap());
    let ids = vec![10, 30];
    let user = build_pointmass_user(&env, internal, &ids, UserOptions::default()).unwrap();
    let demos: Vec<DemoSet> = ids.iter().map(|t| collect_demos(&user, &env, *t, 1, 4).unwrap()).collect();
    let pairs: Vec<_> = sample_constraints(&env, 2, 8).unwrap().into_iter().take(8).collect();
    let tasks = ids.iter().map(|t| env.point_task(*t)).collect();
    ContinuousProblem::new(ids, tasks, env.discount, &demos, vector_pairs(&pairs).unwrap(), candidates).unwrap()
}

fn tabular_objective_error(problem: &TabularProblem, family: DynamicsFamily, seed: u64) -> f64 {
    let mut rng = stream_rng(seed, &[0x7a]);
    let mut phi0 = problem.initial_phi(family, seed).unwrap();
    for p in phi_params_mut(&mut phi0) {
        *p = rng.gen_range(-1.5..1.5);
    }
    let thetas: Vec<f64> = problem.initial_thetas().iter().map(|v| v + rng.gen_range(-2.0..2.0)).collect();
    let rho = rng.gen_range(0.1..2.0);
    let nt = thetas.len();
    let np = phi_params(&phi0).len();
    let mut x = thetas;
    x.extend_from_slice(phi_params(&phi0));
    let obj = FnObjective {
        dim: nt + np,
        f: |x: &[f64]| {
            let mut phi = phi0.clone();
            phi_params_mut(&mut phi).copy_from_slice(&x[nt..]);
            let mut gt = vec![0.0; nt];
            let mut gp = vec![0.0; np];
            let c = problem.evaluate(&x[..nt], &phi, rho, Some((&mut gt, &mut gp)))?;
            gt.extend(gp);
            Ok((c.total, gt))
        },
    };
    check_gradient(&obj, &x, FD_STEP).unwrap().relative_error
}

fn continuous_objective_error(problem: &ContinuousProblem, phi0: ContinuousPhi, seed: u64) -> f64 {
    let mut rng = stream_rng(seed, &[0x7c]);
    let mut phi0 = phi0;
    for p in phi0.params_mut() {
        *p = rng.gen_range(-1.5..1.5);
    }
    let thetas0 = problem.initial_thetas(6, seed);
    let per = thetas0[0].params.len();
    let n = thetas0.len();
    let mut x: Vec<f64> = thetas0.iter().flat_map(|m| m.params.clone()).collect();
    x.extend_from_slice(phi0.params());
    let rho = rng.gen_range(0.1..2.0);
    let demo_idx: Vec<Vec<usize>> = problem.demos.iter().map(|d| (0..d.len().min(6)).collect()).collect();
    let sample_idx = vec![(0..problem.samples.len()).collect::<Vec<_>>(); n];
    let obj = FnObjective {
        dim: x.len(),
        f: |x: &[f64]| {
            let mut thetas = thetas0.clone();
            for (m, c) in thetas.iter_mut().zip(x.chunks(per)) {
                m.params.copy_from_slice(c);
            }
            let mut phi = phi0.clone();
            phi.params_mut().copy_from_slice(&x[n * per..]);
            let mut gt = vec![vec![0.0; per]; n];
            let mut gp = vec![0.0; phi.params().len()];
            let c = problem.evaluate_batch(&thetas, &phi, rho, &demo_idx, &sample_idx, Some((&mut gt, &mut gp)))?;
            let mut g: Vec<f64> = gt.concat();
            g.extend(gp);
            Ok((c.total, g))
        },
    };
    check_gradient(&obj, &x, FD_STEP).unwrap().relative_error
}

fn mlp_error(seed: u64, wrt_input: bool) -> f64 {
    let mut rng = stream_rng(seed, &[0x31]);
    let mut m = MlpQ::init(4, rng.gen_range(2..12), 4, seed);
    if rng.gen_bool(0.5) {
        m = m.with_normalisation(
            (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            (0..4).map(|_| rng.gen_range(0.5..5.0)).collect(),
            rng.gen_range(1.0..20.0),
        );
    }
    let w: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let s0: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |m: &MlpQ, s: &[f64]| -> isql::error::Result<(f64, Vec<f64>, Vec<f64>)> {
        let mut cache = m.new_cache();
        m.forward_into(s, &mut cache)?;
        let value = cache.output.iter().zip(&w).map(|(q, w)| q * w).sum::<f64>();
        let mut gp = vec![0.0; m.params.len()];
        let mut gs = vec![0.0; 4];
        m.backward(&cache, &w, &mut gp, Some(&mut gs));
        Ok((value, gp, gs))
    };
    if wrt_input {
        let obj = FnObjective {
            dim: 4,
            f: |s: &[f64]| loss(&m, s).map(|(v, _, gs)| (v, gs)),
        };
        check_gradient(&obj, &s0, FD_STEP).unwrap().relative_error
    } else {
        let x = m.params.clone();
        let obj = FnObjective {
            dim: x.len(),
            f: |p: &[f64]| {
                let mut mm = m.clone();
                mm.params.copy_from_slice(p);
                loss(&mm, &s0).map(|(v, gp, _)| (v, gp))
            },
        };
        check_gradient(&obj, &x, FD_STEP).unwrap().relative_error
    }
}

fn perceptron_error(seed: u64) -> f64 {
    let mut rng = stream_rng(seed, &[0x9e]);
    let a_n = 4;
    let weights: Vec<f64> = (0..a_n * a_n * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let model = IntentModel::Perceptron {
        action_count: a_n,
        weights: weights.clone(),
    };
    let s = State::Continuous([rng.gen(), rng.gen(), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)]);
    let a = rng.gen_range(0..a_n);
    let w: Vec<f64> = (0..a_n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let obj = FnObjective {
        dim: weights.len(),
        f: |p: &[f64]| {
            let mut m = model.clone();
            m.params_mut().copy_from_slice(p);
            let probs = m.probs(&s, a)?;
            let value = probs.iter().zip(&w).map(|(p, w)| p * w).sum::<f64>();
            let mut g = vec![0.0; p.len()];
            m.backward(&s, a, &w, &mut g)?;
            Ok((value, g))
        },
    };
    check_gradient(&obj, &weights, FD_STEP).unwrap().relative_error
}

fn irl_errors(seed: u64) -> (f64, f64) {
    let env = small_grid();
    let mut rng = stream_rng(seed, &[0x1e]);
    let task = rng.gen_range(0..env.cell_count());
    let user = build_grid_user(&env, env.real_dynamics(), &[task], UserOptions::default()).unwrap();
    let demos = collect_demos(&user, &env, task, 3, seed).unwrap();
    let mdp = IrlMdp::for_grid(&env, &env.real_dynamics()).unwrap();
    let counts = DemoCounts::new(&demos, &mdp).unwrap();
    let options = IrlOptions {
        tolerance: 1e-13,
        ..IrlOptions::default()
    };
    let n = mdp.state_count();
    let r0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let reward = FnObjective {
        dim: n,
        f: |r: &[f64]| {
            let e = evaluate(&mdp, &counts, r, None, &options, None)?;
            Ok((e.objective, e.grad_reward))
        },
    };
    let e_reward = check_gradient(&reward, &r0, FD_STEP).unwrap().relative_error;
    let l0: Vec<f64> = (0..mdp.transitions.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let logits = FnObjective {
        dim: l0.len(),
        f: |l: &[f64]| {
            let m = with_logits(&mdp, l);
            let e = evaluate(&m, &counts, &r0, Some(l), &options, None)?;
            Ok((e.objective, e.grad_logits.expect("logit gradient")))
        },
    };
    (e_reward, check_gradient(&logits, &l0, FD_STEP).unwrap().relative_error)
}

/// Central-difference checks of every differentiable family over `seeds`
/// random draws each.
pub fn gradient_suite(seeds: u64) -> Vec<FamilyCheck> {
    let tab = tabular_problem();
    let lin = continuous_problem(Vec::new());
    let mix = continuous_problem(vec![
        LinearDynamics::real(),
        LinearDynamics::new([1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap(),
        LinearDynamics::new([0.5, 0.2, 0.9, 0.1, 0.3, 0.6, 0.4, 0.8]).unwrap(),
    ]);
    let names = [
        "mlp_q_params",
        "mlp_q_input",
        "tabular_q_and_tabular_dynamics",
        "action_intent_tabular",
        "action_intent_perceptron",
        "linear_dynamics",
        "categorical_mixture",
        "irl_reward",
        "irl_dynamics_logits",
    ];
    let mut out: Vec<FamilyCheck> = names.iter().map(|n| FamilyCheck::new(n)).collect();
    for seed in 0..seeds {
        out[0].record(mlp_error(seed, false));
        out[1].record(mlp_error(seed, true));
        out[2].record(tabular_objective_error(&tab, DynamicsFamily::Tabular, seed));
        out[3].record(tabular_objective_error(&tab, DynamicsFamily::ActionIntent, seed));
        out[4].record(perceptron_error(seed));
        out[5].record(continuous_objective_error(&lin, ContinuousPhi::Linear { latents: [0.0; 8] }, seed));
        out[6].record(continuous_objective_error(&mix, ContinuousPhi::Mixture { logits: vec![0.0; 3] }, seed));
        let (r, l) = irl_errors(seed);
        out[7].record(r);
        out[8].record(l);
    }
    out
}

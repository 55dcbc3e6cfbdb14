//! Experiment harness: config-driven runs, metric tables, plot data and the
//! assist-session service.

pub mod config;
pub mod pipeline;
pub mod serve;
pub mod table;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::isql::TrainArtifact;
use crate::util::{parallel_map, short_hash, worker_count};
pub use config::{EnvKind, ExperimentConfig, ExperimentKind};
use pipeline::{AssistResult, GridRunResult, IrlSeedResult, PointMassRunResult};
use table::{emit_plot_data, fmt, fmt_opt, Table};

pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Debug, Clone)]
pub enum RunResults {
    Grid(Vec<GridRunResult>),
    PointMass(Vec<PointMassRunResult>),
    Irl(Vec<IrlSeedResult>),
    Assist(Vec<(EnvKind, AssistResult)>),
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub results: RunResults,
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    short_hash(serde_json::to_string(config).expect("config serializes").as_bytes())
}

/// Runs the configured experiment and writes its outputs. On failure the
/// files written so far stay in place next to a `FAILED` marker holding the
/// error.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(dir.join("artifacts"))?;
    let marker = dir.join(FAILURE_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker)?;
    }
    let mut out = Output::new(&dir);
    let result = run_stages(config, &mut out);
    match result {
        Ok(results) => Ok(RunReport {
            output_dir: dir,
            files: out.files,
            warnings: out.warnings,
            results,
        }),
        Err(e) => {
            std::fs::write(&marker, format!("{e}\n"))?;
            Err(e)
        }
    }
}

struct Output {
    dir: PathBuf,
    files: Vec<PathBuf>,
    warnings: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            warnings: Vec::new(),
        }
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, text)?;
        self.files.push(path);
        Ok(())
    }

    fn table(&mut self, name: &str, t: &Table) -> Result<()> {
        self.text(name, &t.to_csv()?)
    }

    fn plot(&mut self, name: &str, t: &Table, keys: &[&str], value: &str) -> Result<()> {
        let p = emit_plot_data(t, keys, value)?;
        self.warnings.extend(p.warnings.into_iter().map(|w| format!("{name}: {w}")));
        self.table(name, &p.table)
    }

    fn artifact(&mut self, name: &str, a: &TrainArtifact) -> Result<()> {
        self.text(&format!("artifacts/{name}.json"), &a.to_json()?)
    }
}

fn run_stages(config: &ExperimentConfig, out: &mut Output) -> Result<RunResults> {
    let mut resolved = serde_json::to_value(config)?;
    resolved["config_hash"] = serde_json::Value::String(config_hash(config));
    out.text("config.json", &serde_json::to_string_pretty(&resolved)?)?;
    match config.kind {
        ExperimentKind::GridScramble => grid_scramble(config, out).map(RunResults::Grid),
        ExperimentKind::Pointmass => pointmass(config, out).map(RunResults::PointMass),
        ExperimentKind::IrlMisguided => irl_misguided(config, out).map(RunResults::Irl),
        ExperimentKind::AssistEval => assist_eval(config, out).map(RunResults::Assist),
        ExperimentKind::Serve => Err(Error::Config("serve configs run with `isql serve`".into())),
    }
}

fn collect<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

fn grid_scramble(config: &ExperimentConfig, out: &mut Output) -> Result<Vec<GridRunResult>> {
    let g = &config.grid_scramble;
    let isql = config.grid_isql();
    let mut jobs = Vec::new();
    for c in &g.conditions {
        for n in &g.task_counts {
            for s in &config.seeds {
                jobs.push((*c, *n, *s));
            }
        }
    }
    let results = collect(parallel_map(jobs.len(), worker_count(), |i| {
        let (c, n, s) = jobs[i];
        pipeline::grid_scramble_run(&config.grid, &isql, c, n, g.demos_per_task, s)
    }))?;
    let mut runs = Table::new(&[
        "condition",
        "tasks",
        "seed",
        "accuracy",
        "global_ceiling",
        "support_within_reach",
        "final_total",
    ]);
    let mut curve = Table::new(&["condition", "tasks", "seed", "iteration", "accuracy"]);
    for r in &results {
        let label = r.condition.label();
        runs.push(vec![
            label.clone(),
            r.tasks.to_string(),
            r.seed.to_string(),
            fmt(r.accuracy),
            fmt(r.ceiling),
            fmt(r.support_within_reach),
            fmt(r.artifact.metrics["final_total"]),
        ]);
        for p in &r.artifact.truth_curve {
            curve.push(vec![
                label.clone(),
                r.tasks.to_string(),
                r.seed.to_string(),
                p.iteration.to_string(),
                fmt(p.value),
            ]);
        }
        out.artifact(&format!("{label}_n{}_seed{}", r.tasks, r.seed), &r.artifact)?;
    }
    out.table("runs.csv", &runs)?;
    out.table("accuracy_curve.csv", &curve)?;
    out.plot("accuracy_vs_tasks.csv", &runs, &["condition", "tasks"], "accuracy")?;
    Ok(results)
}

fn pointmass(config: &ExperimentConfig, out: &mut Output) -> Result<Vec<PointMassRunResult>> {
    let isql = config.pointmass_isql();
    let settings = &config.pointmass_run;
    let results = collect(parallel_map(config.seeds.len(), worker_count(), |i| {
        pipeline::pointmass_run(&config.pointmass, settings, &isql, config.seeds[i])
    }))?;
    let mut curve = Table::new(&["seed", "iteration", "value"]);
    for r in &results {
        for p in &r.artifact.truth_curve {
            curve.push(vec![r.seed.to_string(), p.iteration.to_string(), fmt(p.value)]);
        }
        out.artifact(&format!("pointmass_seed{}", r.seed), &r.artifact)?;
    }
    let truth = crate::models::LinearDynamics::new(settings.internal)?;
    if settings.family == crate::isql::DynamicsFamily::CategoricalMixture {
        let mut runs = Table::new(&["seed", "truth_index", "argmax", "truth_weight", "argmax_weight", "hit"]);
        for r in &results {
            let (t, a) = (r.truth_index.unwrap_or(0), r.argmax_candidate().unwrap_or(0));
            runs.push(vec![
                r.seed.to_string(),
                t.to_string(),
                a.to_string(),
                fmt(r.weights[t]),
                fmt(r.weights[a]),
                u8::from(t == a).to_string(),
            ]);
        }
        out.table("runs.csv", &runs)?;
        out.table("truth_weight_curve.csv", &curve)?;
        out.plot("truth_weight_vs_iteration.csv", &curve, &["iteration"], "value")?;
    } else {
        let mut params = Table::new(&["seed", "parameter", "learned", "truth", "abs_error"]);
        let mut runs = Table::new(&["seed", "l2_error"]);
        for r in &results {
            let learned = crate::models::LinearDynamics {
                params: r.params.unwrap_or([f64::NAN; 8]),
            };
            let (per, l2) = crate::isql::linear_parameter_error(&learned, &truth);
            for (k, (name, err)) in per.iter().enumerate() {
                params.push(vec![
                    r.seed.to_string(),
                    name.to_string(),
                    fmt(learned.params[k]),
                    fmt(truth.params[k]),
                    fmt(*err),
                ]);
            }
            runs.push(vec![r.seed.to_string(), fmt(l2)]);
        }
        out.table("runs.csv", &runs)?;
        out.table("params.csv", &params)?;
        out.table("param_error_curve.csv", &curve)?;
        out.plot("param_error_vs_iteration.csv", &curve, &["iteration"], "value")?;
    }
    Ok(results)
}

fn irl_misguided(config: &ExperimentConfig, out: &mut Output) -> Result<Vec<IrlSeedResult>> {
    let isql = config.grid_isql();
    let results = collect(parallel_map(config.seeds.len(), worker_count(), |i| {
        pipeline::irl_misguided_seed(&config.grid, &config.irl, &isql, config.seeds[i])
    }))?;
    let mut returns = Table::new(&["seed", "task", "condition", "mean_return", "standard_error", "success_rate"]);
    let mut phi = Table::new(&["seed", "phi_accuracy"]);
    for r in &results {
        phi.push(vec![r.seed.to_string(), fmt(r.phi_accuracy)]);
        for row in &r.rows {
            returns.push(vec![
                row.seed.to_string(),
                row.task.to_string(),
                row.condition.to_string(),
                fmt(row.estimate.mean),
                fmt_opt(row.estimate.standard_error),
                fmt(row.estimate.success_rate),
            ]);
        }
    }
    out.table("returns.csv", &returns)?;
    out.table("phi_accuracy.csv", &phi)?;
    out.plot("return_by_condition.csv", &returns, &["condition"], "mean_return")?;
    Ok(results)
}

fn assist_eval(config: &ExperimentConfig, out: &mut Output) -> Result<Vec<(EnvKind, AssistResult)>> {
    let a = &config.assist;
    let load = |p: &Option<PathBuf>| p.as_deref().map(TrainArtifact::load).transpose();
    let grid_artifact = load(&a.grid_artifact)?;
    let pm_artifact = load(&a.pointmass_artifact)?;
    let mut jobs = Vec::new();
    for env in &a.envs {
        for s in &config.seeds {
            jobs.push((*env, *s));
        }
    }
    let results = collect(parallel_map(jobs.len(), worker_count(), |i| {
        let (env, seed) = jobs[i];
        let r = match env {
            EnvKind::Grid => pipeline::assist_grid(&config.grid, a, &config.grid_isql(), seed, grid_artifact.as_ref()),
            EnvKind::Pointmass => pipeline::assist_pointmass(
                &config.pointmass,
                a,
                &config.pointmass_run,
                &config.pointmass_isql(),
                seed,
                pm_artifact.as_ref(),
            ),
        };
        r.map(|r| (env, r))
    }))?;
    let mut t = Table::new(&[
        "env",
        "seed",
        "condition",
        "episodes",
        "success_rate",
        "out_of_bounds_rate",
        "timeout_rate",
        "mean_return",
        "changed_actions",
        "phi_score",
    ]);
    for (env, r) in &results {
        let row = |cond: &str, m: &crate::transfer::AssistanceMetrics, changed: Option<usize>| {
            vec![
                env.as_str().to_string(),
                r.seed.to_string(),
                cond.to_string(),
                m.episodes.to_string(),
                fmt(m.success_rate),
                fmt(m.out_of_bounds_rate),
                fmt(m.timeout_rate),
                fmt(m.mean_return),
                changed.map(|c| c.to_string()).unwrap_or_default(),
                fmt(r.phi_score),
            ]
        };
        t.push(row("unassisted", &r.learned.unassisted, None));
        t.push(row("assisted", &r.learned.assisted, Some(r.learned.changed_actions)));
        t.push(row("identity", &r.identity.assisted, Some(r.identity.changed_actions)));
    }
    let mut reference = Table::new(&["env", "seed", "reference_success_rate"]);
    for (env, r) in &results {
        if let Some(s) = r.reference_success {
            reference.push(vec![env.as_str().to_string(), r.seed.to_string(), fmt(s)]);
        }
    }
    out.table("assistance.csv", &t)?;
    out.table("reference.csv", &reference)?;
    out.plot("success_by_condition.csv", &t, &["env", "condition"], "success_rate")?;
    out.plot("out_of_bounds_by_condition.csv", &t, &["env", "condition"], "out_of_bounds_rate")?;
    Ok(results)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// One row per artifact: name, tasks, family, final objective and the
    /// stored dynamics score.
    pub artifacts: Table,
    pub failed: Option<String>,
}

/// Reloads every artifact in a run directory, checking each one's format
/// and config hash, and reports the stored failure marker if any.
pub fn eval_dir(dir: &Path) -> Result<EvalReport> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", dir.display())));
    }
    let failed = std::fs::read_to_string(dir.join(FAILURE_MARKER)).ok();
    let mut names: Vec<PathBuf> = match std::fs::read_dir(dir.join("artifacts")) {
        Ok(entries) => entries
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    names.sort();
    let mut t = Table::new(&["artifact", "config_hash", "family", "tasks", "final_total", "dynamics_score"]);
    for p in names {
        let a = TrainArtifact::load(&p)?;
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        t.push(vec![
            stem,
            a.config_hash.clone(),
            a.phi.family.clone(),
            a.task_ids.len().to_string(),
            fmt_opt(a.metrics.get("final_total").copied()),
            fmt_opt(a.dynamics_score()),
        ]);
    }
    Ok(EvalReport { artifacts: t, failed })
}

/// Summary of a single checkpoint: identity, learned dynamics parameters
/// and stored metrics.
pub fn inspect(path: &Path) -> Result<serde_json::Value> {
    let a = TrainArtifact::load(path)?;
    let phi = match a.phi_model()? {
        crate::models::DynamicsModel::Linear(l) => serde_json::json!({
            "family": "linear",
            "params": crate::models::LINEAR_PARAM_NAMES
                .iter()
                .zip(l.params)
                .map(|(n, v)| (n.to_string(), serde_json::json!(v)))
                .collect::<serde_json::Map<_, _>>(),
        }),
        crate::models::DynamicsModel::Mixture(m) => serde_json::json!({
            "family": "categorical_mixture",
            "weights": m.weights(),
        }),
        _ => serde_json::json!({ "family": a.phi.family, "parameters": a.phi.params.len() }),
    };
    Ok(serde_json::json!({
        "format": a.format,
        "config_hash": a.config_hash,
        "trainer_family": a.config.family,
        "iterations": a.config.iterations,
        "rho": a.config.rho,
        "tasks": a.task_ids,
        "phi": phi,
        "curve_points": a.curve.len(),
        "metrics": a.metrics,
    }))
}

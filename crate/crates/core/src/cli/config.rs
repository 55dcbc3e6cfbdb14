//! Experiment configuration files (TOML). Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{GridWorld, PointMass2D, ScrambleMode};
use crate::error::{Error, Result};
use crate::irl::IrlOptions;
use crate::isql::{DynamicsFamily, IsqlConfig};

pub const OUTPUT_DIR_VAR: &str = "ISQL_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    GridScramble,
    Pointmass,
    IrlMisguided,
    AssistEval,
    Serve,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::GridScramble => "grid_scramble",
            ExperimentKind::Pointmass => "pointmass",
            ExperimentKind::IrlMisguided => "irl_misguided",
            ExperimentKind::AssistEval => "assist_eval",
            ExperimentKind::Serve => "serve",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub grid: GridWorld,
    #[serde(default)]
    pub pointmass: PointMass2D,
    /// Trainer settings; `pointmass_run` and `assist` overlay the
    /// continuous defaults when this table is absent.
    #[serde(default)]
    pub isql: Option<IsqlConfig>,
    #[serde(default)]
    pub grid_scramble: GridScrambleSettings,
    #[serde(default)]
    pub pointmass_run: PointMassSettings,
    #[serde(default)]
    pub irl: IrlSettings,
    #[serde(default)]
    pub assist: AssistSettings,
    #[serde(default)]
    pub serve: ServeSettings,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/out")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCondition {
    pub scramble: ScrambleMode,
    #[serde(default)]
    pub action_intent: bool,
}

impl GridCondition {
    pub fn label(&self) -> String {
        let mode = match self.scramble {
            ScrambleMode::Global => "global",
            ScrambleMode::Local => "local",
        };
        if self.action_intent {
            format!("{mode}_intent")
        } else {
            mode.to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridScrambleSettings {
    pub task_counts: Vec<usize>,
    pub demos_per_task: usize,
    pub conditions: Vec<GridCondition>,
}

impl Default for GridScrambleSettings {
    fn default() -> Self {
        Self {
            task_counts: vec![1, 7, 25, 49],
            demos_per_task: 1000,
            conditions: vec![GridCondition {
                scramble: ScrambleMode::Global,
                action_intent: false,
            }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointMassSettings {
    pub tasks: usize,
    pub demos_per_task: usize,
    pub rollouts: usize,
    /// `linear` or `categorical_mixture`.
    pub family: DynamicsFamily,
    /// Mixture size, the truth included.
    pub candidates: usize,
    /// User's internal linear dynamics `[a13, a24, a33, a44, b11, b22, b31, b42]`.
    pub internal: [f64; 8],
}

pub const VELOCITY_BELIEF: [f64; 8] = [1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];

impl Default for PointMassSettings {
    fn default() -> Self {
        Self {
            tasks: 49,
            demos_per_task: 100,
            rollouts: 500,
            family: DynamicsFamily::Linear,
            candidates: 20,
            internal: VELOCITY_BELIEF,
        }
    }
}

/// Continuous trainer defaults: ρ = 2 with minibatches.
pub fn pointmass_isql_defaults() -> IsqlConfig {
    IsqlConfig {
        rho: 2.0,
        iterations: 8000,
        demo_batch: 64,
        penalty_batch: 64,
        family: DynamicsFamily::Linear,
        theta_learning_rate: 3e-3,
        phi_learning_rate: 1e-3,
        log_every: 100,
        ..IsqlConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrlSettings {
    /// Tasks whose rewards are inferred, drawn per seed.
    pub tasks: usize,
    pub demos_per_task: usize,
    /// Known-reward tasks used to learn φ.
    pub training_tasks: usize,
    pub training_demos_per_task: usize,
    pub eval_episodes: usize,
    pub iterations: usize,
    pub l2: f64,
}

impl Default for IrlSettings {
    fn default() -> Self {
        Self {
            tasks: 10,
            demos_per_task: 1000,
            training_tasks: 49,
            training_demos_per_task: 1000,
            eval_episodes: 500,
            iterations: 200,
            l2: 1e-4,
        }
    }
}

impl IrlSettings {
    pub fn options(&self) -> IrlOptions {
        IrlOptions {
            iterations: self.iterations,
            l2: self.l2,
            ..IrlOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Grid,
    Pointmass,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::Grid => "grid",
            EnvKind::Pointmass => "pointmass",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssistSettings {
    pub envs: Vec<EnvKind>,
    pub episodes: usize,
    /// Tasks used to learn φ; evaluation cycles through the same tasks.
    pub tasks: usize,
    pub demos_per_task: usize,
    /// Evaluate a saved artifact's φ instead of training one.
    pub grid_artifact: Option<PathBuf>,
    pub pointmass_artifact: Option<PathBuf>,
}

impl Default for AssistSettings {
    fn default() -> Self {
        Self {
            envs: vec![EnvKind::Grid, EnvKind::Pointmass],
            episodes: 500,
            tasks: 49,
            demos_per_task: 1000,
            grid_artifact: None,
            pointmass_artifact: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSettings {
    pub address: String,
    pub env: EnvKind,
    /// Artifact whose φ drives assistance; without one, sessions use the
    /// velocity-belief model on the point-mass and the real dynamics on
    /// the grid.
    pub artifact: Option<PathBuf>,
    pub task: usize,
}

impl Default for ServeSettings {
    fn default() -> Self {
        Self {
            address: "127.0.0.1:7878".to_string(),
            env: EnvKind::Pointmass,
            artifact: None,
            task: 24,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies the output-directory environment override.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(dir) = std::env::var(OUTPUT_DIR_VAR) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
        self
    }

    /// Trainer settings for grid runs.
    pub fn grid_isql(&self) -> IsqlConfig {
        self.isql.clone().unwrap_or_default()
    }

    /// Trainer settings for point-mass runs.
    pub fn pointmass_isql(&self) -> IsqlConfig {
        let mut c = self.isql.clone().unwrap_or_else(pointmass_isql_defaults);
        c.family = self.pointmass_run.family;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if let Some(c) = &self.isql {
            c.validate()?;
        }
        let cells = self.grid.cell_count();
        if cells == 0 || !(0.0..=1.0).contains(&self.grid.discount) {
            return bad("grid needs cells and a discount in [0, 1]".into());
        }
        let targets = self.pointmass.lattice * self.pointmass.lattice;
        match self.kind {
            ExperimentKind::GridScramble => {
                let g = &self.grid_scramble;
                if g.task_counts.is_empty() || g.task_counts.iter().any(|n| *n == 0 || *n > cells) {
                    return bad(format!("task counts must lie in 1..={cells}"));
                }
                if g.conditions.is_empty() || g.demos_per_task == 0 {
                    return bad("grid_scramble needs conditions and demos".into());
                }
                if g.conditions.iter().any(|c| c.action_intent)
                    && self.isql.as_ref().is_some_and(|c| c.family != DynamicsFamily::Tabular)
                {
                    return bad("action_intent conditions choose the family themselves; leave isql.family tabular".into());
                }
            }
            ExperimentKind::Pointmass => {
                let p = &self.pointmass_run;
                if p.tasks == 0 || p.tasks > targets || p.demos_per_task == 0 || p.rollouts == 0 {
                    return bad(format!("pointmass_run needs 1..={targets} tasks, demos and rollouts"));
                }
                if !matches!(p.family, DynamicsFamily::Linear | DynamicsFamily::CategoricalMixture) {
                    return bad("pointmass_run.family must be linear or categorical_mixture".into());
                }
                if p.family == DynamicsFamily::CategoricalMixture && p.candidates < 2 {
                    return bad("a mixture needs at least two candidates".into());
                }
                if p.internal.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return bad("internal parameters must lie in [0, 1]".into());
                }
            }
            ExperimentKind::IrlMisguided => {
                let i = &self.irl;
                if i.tasks == 0 || i.tasks > cells || i.training_tasks == 0 || i.training_tasks > cells {
                    return bad(format!("irl task counts must lie in 1..={cells}"));
                }
                if i.demos_per_task == 0 || i.training_demos_per_task == 0 || i.eval_episodes == 0 {
                    return bad("irl needs demos and evaluation episodes".into());
                }
            }
            ExperimentKind::AssistEval => {
                let a = &self.assist;
                if a.envs.is_empty() || a.episodes == 0 || a.tasks == 0 || a.demos_per_task == 0 {
                    return bad("assist needs environments, episodes, tasks and demos".into());
                }
                if a.tasks > cells.min(targets) {
                    return bad(format!("assist.tasks must be at most {}", cells.min(targets)));
                }
            }
            ExperimentKind::Serve => {
                let limit = match self.serve.env {
                    EnvKind::Grid => cells,
                    EnvKind::Pointmass => targets,
                };
                if self.serve.task >= limit {
                    return bad(format!("serve.task must be below {limit}"));
                }
            }
        }
        Ok(())
    }
}

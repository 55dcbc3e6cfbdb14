//! Trained-model artifacts: a JSON checkpoint with the learned dynamics,
//! per-task Q functions, optimizer state, training curve and metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IsqlConfig;
use crate::error::{invalid, Error, Result};
use crate::models::{AdamState, DynamicsModel, ModelRecord, QModel};
use crate::util::short_hash;

pub const ARTIFACT_FORMAT: &str = "isql-artifact 1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub total: f64,
    pub nll: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthPoint {
    pub iteration: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub theta: AdamState,
    pub phi: AdamState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArtifact {
    pub format: String,
    pub config_hash: String,
    pub config: IsqlConfig,
    pub task_ids: Vec<usize>,
    pub phi: ModelRecord,
    pub thetas: Vec<ModelRecord>,
    pub optimizer: OptimizerState,
    pub curve: Vec<CurvePoint>,
    /// Dynamics error against a known truth, when one was supplied.
    pub truth_curve: Vec<TruthPoint>,
    pub metrics: BTreeMap<String, f64>,
}

pub fn config_hash(config: &IsqlConfig) -> String {
    short_hash(serde_json::to_string(config).expect("config serializes").as_bytes())
}

impl TrainArtifact {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: IsqlConfig,
        task_ids: Vec<usize>,
        phi: ModelRecord,
        thetas: Vec<ModelRecord>,
        optimizer: OptimizerState,
        curve: Vec<CurvePoint>,
        truth_curve: Vec<TruthPoint>,
        metrics: BTreeMap<String, f64>,
    ) -> Self {
        Self {
            format: ARTIFACT_FORMAT.to_string(),
            config_hash: config_hash(&config),
            config,
            task_ids,
            phi,
            thetas,
            optimizer,
            curve,
            truth_curve,
            metrics,
        }
    }

    pub fn phi_model(&self) -> Result<DynamicsModel> {
        DynamicsModel::try_from(&self.phi)
    }

    pub fn theta_models(&self) -> Result<Vec<QModel>> {
        self.thetas.iter().map(QModel::try_from).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let artifact: Self = serde_json::from_str(text)?;
        if artifact.format != ARTIFACT_FORMAT {
            return Err(invalid(format!("unsupported artifact format '{}'", artifact.format)));
        }
        let recomputed = config_hash(&artifact.config);
        if recomputed != artifact.config_hash {
            return Err(Error::HashMismatch {
                expected: recomputed,
                found: artifact.config_hash,
            });
        }
        Ok(artifact)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Loads and refuses an artifact trained under a different config
    /// unless `force` is set.
    pub fn load_checked(path: &Path, expected_hash: &str, force: bool) -> Result<Self> {
        let artifact = Self::load(path)?;
        if artifact.config_hash != expected_hash && !force {
            return Err(Error::HashMismatch {
                expected: expected_hash.to_string(),
                found: artifact.config_hash,
            });
        }
        Ok(artifact)
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("iteration,total,nll,penalty\n");
        for p in &self.curve {
            writeln!(out, "{},{},{},{}", p.iteration, p.total, p.nll, p.penalty).unwrap();
        }
        out
    }

    pub fn truth_csv(&self) -> String {
        let mut out = String::from("iteration,value\n");
        for p in &self.truth_curve {
            writeln!(out, "{},{}", p.iteration, p.value).unwrap();
        }
        out
    }

    /// Final dynamics error reported by training against a known truth.
    pub fn dynamics_score(&self) -> Option<f64> {
        self.metrics.get("dynamics_score").copied()
    }
}

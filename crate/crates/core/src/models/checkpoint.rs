//! Flat, self-describing parameter records used inside checkpoint documents.
//!
//! Every record carries a family tag, its shape, and its parameters as a
//! flat array. Floats are written in shortest round-trip decimal form, so a
//! save/load cycle reproduces every parameter bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::dynamics::{
    ActionIntentDynamics, CategoricalMixtureDynamics, DeterministicTable, DynamicsModel, IntentModel,
    LinearDynamics, TabularDynamics,
};
use crate::models::mlp::MlpQ;
use crate::soft::TabularSoftQ;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub family: String,
    pub shape: Vec<usize>,
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aux: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner: Option<Box<ModelRecord>>,
}

impl ModelRecord {
    fn new(family: &str, shape: Vec<usize>, params: Vec<f64>) -> Self {
        Self {
            family: family.to_string(),
            shape,
            params,
            aux: Vec::new(),
            inner: None,
        }
    }

    fn expect_shape(&self, len: usize) -> Result<()> {
        if self.shape.len() != len {
            return Err(invalid(format!("{} record needs a rank-{len} shape", self.family)));
        }
        Ok(())
    }

    fn expect_params(&self, len: usize) -> Result<()> {
        if self.params.len() != len {
            return Err(invalid(format!(
                "{} record has {} parameters, shape implies {len}",
                self.family,
                self.params.len()
            )));
        }
        Ok(())
    }
}

impl From<&DynamicsModel> for ModelRecord {
    fn from(model: &DynamicsModel) -> Self {
        match model {
            DynamicsModel::Deterministic(d) => ModelRecord::new(
                "deterministic",
                vec![d.source_count, d.action_count, d.state_count],
                d.next.iter().map(|n| *n as f64).collect(),
            ),
            DynamicsModel::Tabular(t) => ModelRecord::new(
                "tabular",
                vec![t.source_count, t.action_count, t.state_count],
                t.logits.clone(),
            ),
            DynamicsModel::Linear(l) => ModelRecord::new("linear", vec![8], l.params.to_vec()),
            DynamicsModel::Mixture(m) => {
                let mut rec = ModelRecord::new("categorical_mixture", vec![m.logits.len(), 8], m.logits.clone());
                rec.aux = m.candidates.iter().flat_map(|c| c.params).collect();
                rec
            }
            DynamicsModel::ActionIntent(a) => {
                let mut rec = match &a.intent {
                    IntentModel::Tabular {
                        source_count,
                        action_count,
                        logits,
                    } => ModelRecord::new("action_intent", vec![*source_count, *action_count], logits.clone()),
                    IntentModel::Perceptron { action_count, weights } => {
                        ModelRecord::new("action_intent_perceptron", vec![*action_count], weights.clone())
                    }
                };
                rec.inner = Some(Box::new(ModelRecord::from(a.real.as_ref())));
                rec
            }
        }
    }
}

impl TryFrom<&ModelRecord> for DynamicsModel {
    type Error = crate::error::Error;

    fn try_from(rec: &ModelRecord) -> Result<Self> {
        match rec.family.as_str() {
            "deterministic" => {
                rec.expect_shape(3)?;
                let (s, a, n) = (rec.shape[0], rec.shape[1], rec.shape[2]);
                rec.expect_params(s * a)?;
                let next = rec
                    .params
                    .iter()
                    .map(|v| {
                        if *v >= 0.0 && v.fract() == 0.0 {
                            Ok(*v as usize)
                        } else {
                            Err(invalid(format!("bad state index {v}")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(DynamicsModel::Deterministic(DeterministicTable::new(s, n, a, next)?))
            }
            "tabular" => {
                rec.expect_shape(3)?;
                let (s, a, n) = (rec.shape[0], rec.shape[1], rec.shape[2]);
                rec.expect_params(s * a * n)?;
                Ok(DynamicsModel::Tabular(TabularDynamics {
                    source_count: s,
                    action_count: a,
                    state_count: n,
                    logits: rec.params.clone(),
                }))
            }
            "linear" => {
                rec.expect_params(8)?;
                let mut p = [0.0; 8];
                p.copy_from_slice(&rec.params);
                Ok(DynamicsModel::Linear(LinearDynamics::new(p)?))
            }
            "categorical_mixture" => {
                rec.expect_shape(2)?;
                let k = rec.shape[0];
                rec.expect_params(k)?;
                if rec.aux.len() != k * 8 {
                    return Err(invalid("mixture candidates have the wrong length"));
                }
                let candidates = rec
                    .aux
                    .chunks(8)
                    .map(|c| {
                        let mut p = [0.0; 8];
                        p.copy_from_slice(c);
                        LinearDynamics::new(p)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(DynamicsModel::Mixture(CategoricalMixtureDynamics::new(
                    candidates,
                    rec.params.clone(),
                )?))
            }
            "action_intent" | "action_intent_perceptron" => {
                let inner = rec
                    .inner
                    .as_deref()
                    .ok_or_else(|| invalid("action-intent record without real dynamics"))?;
                let intent = if rec.family == "action_intent" {
                    rec.expect_shape(2)?;
                    let (s, a) = (rec.shape[0], rec.shape[1]);
                    rec.expect_params(s * a * a)?;
                    IntentModel::Tabular {
                        source_count: s,
                        action_count: a,
                        logits: rec.params.clone(),
                    }
                } else {
                    rec.expect_shape(1)?;
                    let a = rec.shape[0];
                    rec.expect_params(a * a * crate::models::dynamics::PERCEPTRON_INPUTS)?;
                    IntentModel::Perceptron {
                        action_count: a,
                        weights: rec.params.clone(),
                    }
                };
                Ok(DynamicsModel::ActionIntent(ActionIntentDynamics {
                    intent,
                    real: Box::new(DynamicsModel::try_from(inner)?),
                }))
            }
            other => Err(invalid(format!("unknown dynamics family '{other}'"))),
        }
    }
}

/// Learned per-task soft Q representation.
#[derive(Debug, Clone, PartialEq)]
pub enum QModel {
    Tabular(TabularSoftQ),
    Mlp(MlpQ),
}

impl From<&QModel> for ModelRecord {
    fn from(q: &QModel) -> Self {
        match q {
            QModel::Tabular(t) => ModelRecord::new("tabular_q", vec![t.state_count, t.action_count], t.values.clone()),
            QModel::Mlp(m) => {
                let mut rec = ModelRecord::new("mlp_q", vec![m.input_dim, m.hidden_dim, m.action_count], m.params.clone());
                rec.aux = m
                    .input_offset
                    .iter()
                    .chain(&m.input_scale)
                    .copied()
                    .chain(std::iter::once(m.output_scale))
                    .collect();
                rec
            }
        }
    }
}

impl TryFrom<&ModelRecord> for QModel {
    type Error = crate::error::Error;

    fn try_from(rec: &ModelRecord) -> Result<Self> {
        match rec.family.as_str() {
            "tabular_q" => {
                rec.expect_shape(2)?;
                rec.expect_params(rec.shape[0] * rec.shape[1])?;
                Ok(QModel::Tabular(TabularSoftQ {
                    state_count: rec.shape[0],
                    action_count: rec.shape[1],
                    values: rec.params.clone(),
                }))
            }
            "mlp_q" => {
                rec.expect_shape(3)?;
                let (d, h, a) = (rec.shape[0], rec.shape[1], rec.shape[2]);
                rec.expect_params(MlpQ::param_count(d, h, a))?;
                if rec.aux.len() != 2 * d + 1 {
                    return Err(invalid("mlp normalisation has the wrong length"));
                }
                let mut m = MlpQ::zeros(d, h, a);
                m.params = rec.params.clone();
                m.input_offset = rec.aux[..d].to_vec();
                m.input_scale = rec.aux[d..2 * d].to_vec();
                m.output_scale = rec.aux[2 * d];
                Ok(QModel::Mlp(m))
            }
            other => Err(invalid(format!("unknown Q family '{other}'"))),
        }
    }
}

impl crate::soft::SoftQFunction for QModel {
    fn q_values(&self, s: &crate::soft::State) -> Result<Vec<f64>> {
        match self {
            QModel::Tabular(t) => t.q_values(s),
            QModel::Mlp(m) => m.q_values(s),
        }
    }
}

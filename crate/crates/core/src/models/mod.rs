//! Differentiable parameter containers, the gradient facility, and Adam.

pub mod adam;
pub mod checkpoint;
pub mod dynamics;
pub mod grad;
pub mod mlp;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{ModelRecord, QModel};
pub use dynamics::{
    ActionIntentDynamics, CategoricalMixtureDynamics, DeterministicTable, DynamicsModel, IntentModel, LinearDynamics,
    TabularDynamics, CONTROLS, LINEAR_PARAM_NAMES,
};
pub use grad::{check_gradient, finite_difference_gradient, gradient, relative_error, FnObjective, GradCheck, Objective};
pub use mlp::{MlpCache, MlpQ};

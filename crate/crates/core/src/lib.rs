//! Inverse soft Q-learning: recover a demonstrator's internal dynamics from
//! demonstrations on tasks with known rewards, then use them to assist the
//! demonstrator and to infer rewards from misguided demonstrations.

pub mod cli;
pub mod envs;
pub mod irl;
pub mod isql;
pub mod error;
pub mod models;
pub mod numeric;
pub mod simuser;
pub mod soft;
pub mod transfer;
pub mod util;

pub use error::{Error, Result};

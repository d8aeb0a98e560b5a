//! Iterative batch reinforcement learning: ensemble model-based policy
//! search through learned models, with behavior-based safety, trajectory
//! diversity, two simulators and an experiment harness.

pub mod diffcore;
pub mod diversity;
pub mod envs;
mod error;
pub mod harness;
pub mod ibrl;
pub mod nets;
pub mod rollout;
pub mod safety;

pub use error::{Error, Result};

//! Core building blocks for adaptive, reinforcement-learned A/B allocation:
//! numeric kernels, prompt-conditioned variant generation, state fusion, the
//! PPO actor-critic, the memory-augmented reward estimator, classical
//! baselines, and the click simulator with its Criteo log reader.

pub mod agent;
pub mod baselines;
pub mod encoder;
pub mod env;
pub mod error;
pub mod memory;
pub mod numkit;
pub mod variants;

pub use error::{Error, Result};

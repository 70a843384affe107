//! Judge-rewarded reasoning policy training.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod grpo;
pub mod lm;
pub mod remote;
pub mod reward;
pub mod rng;
pub mod rollout;

pub use error::{Error, Result};

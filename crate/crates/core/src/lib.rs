//! Simulator for federated learning with personalised learnable structured
//! sparsity and a per-client bandit that chooses each client's sparse ratio.

pub mod bandit;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod costmodel;
pub mod datahetero;
pub mod error;
pub mod localtrain;
pub mod metrics;
pub mod netcore;
pub mod orchestrator;
pub mod rng;
pub mod sparsity;
pub mod verify;

pub use config::Config;
pub use error::{FlpsError, Result};
pub use orchestrator::Simulation;

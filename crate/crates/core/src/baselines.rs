//! Heuristic patterns, fixed ratio rules and a plain FedAvg reference loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datahetero::Dataset;
use crate::error::{FlpsError, Result};
use crate::netcore::{self, Arch, ParamSet};
use crate::orchestrator::select_clients;
use crate::rng::{stream, Purpose};
use crate::sparsity::{keep_count, magnitude_summary, top_k, SparsePattern, SparseRatio, UnitMask};

/// How a client chooses which hidden units to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PatternStrategy {
    /// Top-k of the learned importance scores.
    #[default]
    Learnable,
    /// A uniformly random subset of each layer.
    Random,
    /// The first units of each layer.
    Ordered,
    /// Top-k of the current weight magnitudes.
    Magnitude,
}

impl PatternStrategy {
    pub const ALL: [PatternStrategy; 4] =
        [PatternStrategy::Learnable, PatternStrategy::Random, PatternStrategy::Ordered, PatternStrategy::Magnitude];

    pub fn name(self) -> &'static str {
        match self {
            PatternStrategy::Learnable => "learnable",
            PatternStrategy::Random => "random",
            PatternStrategy::Ordered => "ordered",
            PatternStrategy::Magnitude => "magnitude",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| FlpsError::config(format!("unknown pattern strategy {s:?}")))
    }
}

/// How the server picks each client's sparse ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RatioRule {
    /// Per-client UCB-V bandit.
    #[default]
    Pucbv,
    /// The ratio equals the client's capability.
    Rcr,
    /// One configured ratio for everyone.
    Fixed,
}

/// Capability-matched ratio, floored at `s_min`.
pub fn rcr_ratio(capability: f64, s_min: f64) -> f64 {
    capability.max(s_min)
}

/// Pattern for the non-learnable strategies.
pub fn heuristic_pattern<R: Rng + ?Sized>(
    strategy: PatternStrategy,
    arch: &Arch,
    params: &ParamSet,
    s: SparseRatio,
    rng: &mut R,
) -> Result<SparsePattern> {
    let widths = arch.hidden_widths();
    let mut bits = Vec::with_capacity(arch.unit_count());
    match strategy {
        PatternStrategy::Learnable => {
            return Err(FlpsError::structural("learnable patterns come from the importance scores"));
        }
        PatternStrategy::Ordered => {
            for &w in &widths {
                let k = keep_count(s, w);
                bits.extend((0..w).map(|i| i < k));
            }
        }
        PatternStrategy::Random => {
            for &w in &widths {
                let k = keep_count(s, w);
                let mut layer = vec![false; w];
                for i in rand::seq::index::sample(rng, w, k) {
                    layer[i] = true;
                }
                bits.extend(layer);
            }
        }
        PatternStrategy::Magnitude => {
            let mags = magnitude_summary(arch, params)?;
            let mut offset = 0;
            for &w in &widths {
                let mut layer = vec![false; w];
                for i in top_k(&mags[offset..offset + w], keep_count(s, w)) {
                    layer[i] = true;
                }
                bits.extend(layer);
                offset += w;
            }
        }
    }
    Ok(SparsePattern { bits })
}

/// Settings for [`fedavg_reference`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedAvgSettings {
    pub seed: u64,
    pub rounds: usize,
    pub client_fraction: f64,
    pub local_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// Dense FedAvg over the given client training sets, sharing the simulator's
/// client-selection and batch streams. Returns the global model after every
/// round.
pub fn fedavg_reference(arch: &Arch, init: &ParamSet, clients: &[Dataset], cfg: &FedAvgSettings) -> Result<Vec<ParamSet>> {
    let ones = UnitMask::all_ones(arch);
    let mut global = init.clone();
    let mut history = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let mut sel_rng = stream(cfg.seed, Purpose::Selection, 0, round as u64);
        let mut selected = select_clients(clients.len(), cfg.client_fraction, &mut sel_rng)?;
        selected.sort_unstable();
        let mut weighted = ParamSet::zeros(arch);
        let mut total = 0.0;
        for &k in &selected {
            let mut rng = stream(cfg.seed, Purpose::Batch, k as u64, round as u64);
            let mut w = global.clone();
            for _ in 0..cfg.local_iters {
                let b = clients[k].sample_batch(cfg.batch_size, &mut rng)?;
                let (logits, cache) = netcore::forward(arch, &w, &ones, &b.inputs)?;
                let g = netcore::backward(arch, &ones, &b, &logits, &cache)?;
                w = netcore::sgd_step(&w, &g.grads, cfg.lr, None)?;
            }
            let n = clients[k].len() as f64;
            weighted = weighted.zip_map(&global.zip_map(&w, |a, b| a - b)?, |acc, d| acc + n * d)?;
            total += n;
        }
        global = global.zip_map(&weighted, |g, d| g - d / total)?;
        history.push(global.clone());
    }
    Ok(history)
}
